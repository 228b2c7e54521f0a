#pragma once

#include <utility>
#include <vector>

#include "latgen/audio.hpp"
#include "latgen/tensor.hpp"

namespace latgen::vae {

struct VaeConfig {
    std::vector<int64_t> strides{2, 4, 4, 5};
    std::vector<int64_t> channel_multipliers{1, 2, 4, 8};
    int64_t base_channels = 16;
    int64_t latent_dim = 16;
    int sample_rate = 8000;

    double beta = 1e-4;       // KL weight inside the ELBO term
    double lambda_kl = 1.0;   // weight of the ELBO term in the total
    double lambda_adv = 0.1;
    double lambda_spec = 1.0;
    // when false, lambda_kl scales only the KL part and the reconstruction
    // term enters the total unweighted
    bool kl_weight_scales_recon = true;
    audio::SpecDistance spec_mode = audio::SpecDistance::complex_l1;
    std::vector<double> spec_weights = std::vector<double>(7, 1.0);

    // 50 Hz frame rate at 8 kHz
    static VaeConfig toy();
    // strides {2,4,4,5,6}: x960, 50 Hz at 48 kHz, 256-dim latent
    static VaeConfig full();

    int64_t downsampling_factor() const;
    double frame_rate() const { return static_cast<double>(sample_rate) / downsampling_factor(); }
    int64_t frames_for(int64_t samples) const; // ceil(samples / factor)
    void validate() const;
};

struct EncoderOutput {
    Tensor mu;        // [B, frames, latent]
    Tensor log_sigma; // [B, frames, latent]
};

// Strided convolutional encoder/decoder with snake activations and a
// diagonal-Gaussian bottleneck. Parameters live in a ParamStore shared with
// the checkpoint/optimizer machinery.
class Vae {
public:
    Vae(VaeConfig cfg, uint64_t seed);

    const VaeConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    // graph-building forwards; x is [B,1,T] with T a multiple of the factor
    std::pair<Var, Var> encode_g(Graph& g, const BoundParams& p, Var x) const;
    Var decode_g(Graph& g, const BoundParams& p, Var z) const;

    // [B,1,T] tensor from waveforms, right-padded with zeros to a multiple of
    // the downsampling factor
    Tensor pack_batch(const std::vector<audio::Waveform>& batch) const;

    // deterministic eval entry points
    EncoderOutput encode(const std::vector<audio::Waveform>& batch) const;
    std::vector<audio::Waveform> decode(const Tensor& z) const;

private:
    VaeConfig cfg_;
    ParamStore params_;
};

// z = mu + exp(log_sigma) . eps
Tensor reparameterize(const EncoderOutput& eo, const Tensor& eps);
Var reparameterize_g(Graph& g, Var mu, Var log_sigma, const Tensor& eps);

// closed-form KL(q || N(0,I)), averaged over batch, summed over frames x dims
double kl_loss(const EncoderOutput& eo);
Var kl_loss_g(Graph& g, Var mu, Var log_sigma);

// One small conv stack per STFT resolution over magnitude spectrograms;
// emits a least-squares score map per resolution.
class Discriminator {
public:
    Discriminator(int sample_rate, uint64_t seed, int64_t channels = 16);

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    int64_t num_scales() const { return static_cast<int64_t>(audio::multires_frame_sizes().size()); }

    // mag is [B, bins, frames] for the given resolution index
    Var score_g(Graph& g, const BoundParams& p, Var mag, size_t res_index) const;

    // eval: score maps for a waveform batch at every resolution
    std::vector<Tensor> scores(const std::vector<audio::Waveform>& batch) const;

private:
    int64_t channels_;
    ParamStore params_;
};

// --- custom autodiff ops over waveforms --------------------------------------

// magnitude spectrogram [B, bins, frames] of wave [B,T]; differentiable in wave
Var stft_mag_op(Graph& g, Var wave, const audio::StftPlan& plan);

// sum_i w_i * L1(STFT_i(wave) - STFT_i(target_i)); differentiable in wave
Var multires_spec_op(Graph& g, Var wave, const std::vector<audio::Waveform>& targets,
                     const std::vector<double>& weights, audio::SpecDistance mode);

// --- training losses -----------------------------------------------------------

struct GeneratorLoss {
    Var total;
    Var recon; // mean squared error
    Var kl;
    Var spec;
    Var adv;
};

// Builds the full generator-side loss. Discriminator parameters are bound as
// constants so adversarial gradients flow only through the fake waveform.
GeneratorLoss generator_loss_g(Graph& g, const Vae& vae, const BoundParams& vp,
                               const Discriminator& disc, const BoundParams& dp_const,
                               const Tensor& x, const Tensor& eps);

// (D(x)-1)^2 + D(xhat)^2 averaged per scale then over scales; spectrogram
// inputs are constants, so only discriminator parameters receive gradient.
Var discriminator_loss_g(Graph& g, const Discriminator& disc, const BoundParams& dp,
                         const std::vector<audio::Waveform>& real,
                         const std::vector<audio::Waveform>& fake);

// eval versions of Eqs. (adv, D): mean over scales of (D(xhat)-1)^2 and of
// (D(x)-1)^2 + D(xhat)^2
std::pair<double, double> adversarial_losses(const std::vector<audio::Waveform>& real,
                                             const std::vector<audio::Waveform>& fake,
                                             const Discriminator& disc);

// weighted total (eval): lambda_kl * (recon + beta*KL) + lambda_adv * L_adv +
// lambda_spec * L_spec
double vae_total_loss(const Vae& vae, const std::vector<audio::Waveform>& x,
                      const std::vector<audio::Waveform>& xhat, const EncoderOutput& eo,
                      const Discriminator& disc);

} // namespace latgen::vae

#include "latgen/vae.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace latgen::vae {

namespace {

void check(bool ok, ErrorKind kind, const std::string& msg) {
    if (!ok) throw Error(kind, msg);
}

int64_t conv_kernel(int64_t stride) { return 2 * stride + 1; } // ceil-division length rule

// transposed kernel/padding giving exactly L*stride outputs
std::pair<int64_t, int64_t> tconv_kernel(int64_t stride) {
    int64_t k = (stride % 2 == 0) ? 2 * stride : 2 * stride + 1;
    return {k, (k - stride) / 2};
}

Tensor init_conv(std::vector<int64_t> shape, int64_t fan_in, Rng& rng) {
    return Tensor::randn(std::move(shape), rng, 1.0 / std::sqrt(static_cast<double>(fan_in)));
}

} // namespace

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

VaeConfig VaeConfig::toy() { return VaeConfig{}; }

VaeConfig VaeConfig::full() {
    VaeConfig cfg;
    cfg.strides = {2, 4, 4, 5, 6};
    cfg.channel_multipliers = {1, 2, 4, 8, 16};
    cfg.base_channels = 32;
    cfg.latent_dim = 256;
    cfg.sample_rate = 48000;
    return cfg;
}

void VaeConfig::validate() const {
    check(!strides.empty(), ErrorKind::config, "vae: empty stride list");
    check(strides.size() == channel_multipliers.size(), ErrorKind::config,
          "vae: strides and channel multipliers must align");
    for (int64_t s : strides) check(s >= 1, ErrorKind::config, "vae: strides must be >= 1");
    check(base_channels >= 1 && latent_dim >= 1, ErrorKind::config, "vae: bad channel config");
    check(spec_weights.size() == audio::multires_frame_sizes().size(), ErrorKind::config,
          "vae: expected one spectral weight per resolution");
}

int64_t VaeConfig::downsampling_factor() const {
    int64_t f = 1;
    for (int64_t s : strides) f *= s;
    return f;
}

int64_t VaeConfig::frames_for(int64_t samples) const {
    int64_t f = downsampling_factor();
    return (samples + f - 1) / f;
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

Vae::Vae(VaeConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(Rng::derive(seed, 0x7ae));
    const int64_t n = static_cast<int64_t>(cfg_.strides.size());
    auto ch = [&](int64_t i) { return cfg_.base_channels * cfg_.channel_multipliers[static_cast<size_t>(i)]; };

    params_.add("enc.in.w", init_conv({cfg_.base_channels, 1, 7}, 7, rng));
    params_.add("enc.in.b", Tensor({cfg_.base_channels}));
    int64_t c_in = cfg_.base_channels;
    for (int64_t i = 0; i < n; ++i) {
        int64_t s = cfg_.strides[static_cast<size_t>(i)];
        int64_t k = conv_kernel(s);
        std::string pfx = "enc.block" + std::to_string(i);
        params_.add(pfx + ".log_alpha", Tensor({c_in}));
        params_.add(pfx + ".w", init_conv({ch(i), c_in, k}, c_in * k, rng));
        params_.add(pfx + ".b", Tensor({ch(i)}));
        c_in = ch(i);
    }
    params_.add("enc.head.log_alpha", Tensor({c_in}));
    params_.add("enc.head.w", init_conv({2 * cfg_.latent_dim, c_in, 3}, c_in * 3, rng));
    params_.add("enc.head.b", Tensor({2 * cfg_.latent_dim}));

    params_.add("dec.in.w", init_conv({c_in, cfg_.latent_dim, 3}, cfg_.latent_dim * 3, rng));
    params_.add("dec.in.b", Tensor({c_in}));
    for (int64_t i = n - 1; i >= 0; --i) {
        int64_t s = cfg_.strides[static_cast<size_t>(i)];
        auto [k, p] = tconv_kernel(s);
        (void)p;
        int64_t cout = i == 0 ? cfg_.base_channels : ch(i - 1);
        std::string pfx = "dec.block" + std::to_string(i);
        params_.add(pfx + ".log_alpha", Tensor({ch(i)}));
        params_.add(pfx + ".w", init_conv({ch(i), cout, k}, ch(i) * k / s, rng));
        params_.add(pfx + ".b", Tensor({cout}));
    }
    params_.add("dec.head.log_alpha", Tensor({cfg_.base_channels}));
    params_.add("dec.head.w", init_conv({1, cfg_.base_channels, 7}, cfg_.base_channels * 7, rng));
    params_.add("dec.head.b", Tensor({1}));
}

std::pair<Var, Var> Vae::encode_g(Graph& g, const BoundParams& p, Var x) const {
    const Tensor& tx = x.value();
    check(tx.rank() == 3 && tx.dim(1) == 1, ErrorKind::shape, "encode: input must be [B,1,T]");
    check(tx.dim(2) % cfg_.downsampling_factor() == 0, ErrorKind::shape,
          "encode: input length must be a multiple of the downsampling factor");
    Var h = g.conv1d(x, p.at("enc.in.w"), p.at("enc.in.b"), 1, 3);
    for (size_t i = 0; i < cfg_.strides.size(); ++i) {
        int64_t s = cfg_.strides[i];
        std::string pfx = "enc.block" + std::to_string(i);
        h = g.snake(h, g.exp(p.at(pfx + ".log_alpha")));
        h = g.conv1d(h, p.at(pfx + ".w"), p.at(pfx + ".b"), s, s);
    }
    h = g.snake(h, g.exp(p.at("enc.head.log_alpha")));
    h = g.conv1d(h, p.at("enc.head.w"), p.at("enc.head.b"), 1, 1);
    Var mu = g.transpose_12(g.slice_channels(h, 0, cfg_.latent_dim));
    Var ls = g.transpose_12(g.slice_channels(h, cfg_.latent_dim, 2 * cfg_.latent_dim));
    return {mu, ls};
}

Var Vae::decode_g(Graph& g, const BoundParams& p, Var z) const {
    const Tensor& tz = z.value();
    check(tz.rank() == 3, ErrorKind::shape, "decode: latent must be [B,frames,latent]");
    check(tz.dim(2) == cfg_.latent_dim, ErrorKind::shape,
          "decode: latent dim " + std::to_string(tz.dim(2)) + " != config " +
              std::to_string(cfg_.latent_dim));
    Var h = g.conv1d(g.transpose_12(z), p.at("dec.in.w"), p.at("dec.in.b"), 1, 1);
    for (int64_t i = static_cast<int64_t>(cfg_.strides.size()) - 1; i >= 0; --i) {
        int64_t s = cfg_.strides[static_cast<size_t>(i)];
        auto [k, pad] = tconv_kernel(s);
        (void)k;
        std::string pfx = "dec.block" + std::to_string(i);
        h = g.snake(h, g.exp(p.at(pfx + ".log_alpha")));
        h = g.conv_transpose1d(h, p.at(pfx + ".w"), p.at(pfx + ".b"), s, pad);
    }
    h = g.snake(h, g.exp(p.at("dec.head.log_alpha")));
    return g.conv1d(h, p.at("dec.head.w"), p.at("dec.head.b"), 1, 3);
}

Tensor Vae::pack_batch(const std::vector<audio::Waveform>& batch) const {
    check(!batch.empty(), ErrorKind::shape, "empty waveform batch");
    const int64_t factor = cfg_.downsampling_factor();
    int64_t max_len = 0;
    for (const auto& w : batch) {
        check(w.sample_rate == cfg_.sample_rate, ErrorKind::config,
              "waveform sample rate does not match the VAE config");
        check(w.size() >= factor, ErrorKind::domain,
              "waveform shorter than one latent frame (" + std::to_string(w.size()) + " < " +
                  std::to_string(factor) + ")");
        max_len = std::max(max_len, w.size());
    }
    int64_t padded = cfg_.frames_for(max_len) * factor;
    Tensor x({static_cast<int64_t>(batch.size()), 1, padded});
    for (size_t b = 0; b < batch.size(); ++b)
        std::copy(batch[b].samples.begin(), batch[b].samples.end(),
                  x.data.begin() + static_cast<int64_t>(b) * padded);
    return x;
}

EncoderOutput Vae::encode(const std::vector<audio::Waveform>& batch) const {
    Graph g;
    BoundParams p = bind_params(g, params_, false);
    Var x = g.constant(pack_batch(batch));
    auto [mu, ls] = encode_g(g, p, x);
    return {g.value(mu), g.value(ls)};
}

std::vector<audio::Waveform> Vae::decode(const Tensor& z) const {
    Graph g;
    BoundParams p = bind_params(g, params_, false);
    Var out = decode_g(g, p, g.constant(z));
    const Tensor& t = g.value(out);
    std::vector<audio::Waveform> waves;
    int64_t B = t.dim(0), T = t.dim(2);
    for (int64_t b = 0; b < B; ++b) {
        audio::Waveform w;
        w.sample_rate = cfg_.sample_rate;
        w.samples.resize(static_cast<size_t>(T));
        for (int64_t i = 0; i < T; ++i) {
            double v = t.data[static_cast<size_t>(b * T + i)];
            if (v > 1.0) {
                v = 1.0;
                ++w.clip_count;
            } else if (v < -1.0) {
                v = -1.0;
                ++w.clip_count;
            }
            w.samples[static_cast<size_t>(i)] = v;
        }
        waves.push_back(std::move(w));
    }
    return waves;
}

// ---------------------------------------------------------------------------
// bottleneck / losses
// ---------------------------------------------------------------------------

Tensor reparameterize(const EncoderOutput& eo, const Tensor& eps) {
    check(eps.shape == eo.mu.shape, ErrorKind::shape,
          "reparameterize: noise shape must match the posterior mean");
    Tensor z;
    z.shape = eo.mu.shape;
    z.data.resize(eo.mu.data.size());
    for (size_t i = 0; i < z.data.size(); ++i)
        z.data[i] = eo.mu.data[i] + std::exp(eo.log_sigma.data[i]) * eps.data[i];
    return z;
}

Var reparameterize_g(Graph& g, Var mu, Var log_sigma, const Tensor& eps) {
    check(eps.shape == mu.value().shape, ErrorKind::shape,
          "reparameterize: noise shape must match the posterior mean");
    return g.add(mu, g.mul(g.exp(log_sigma), g.constant(eps)));
}

double kl_loss(const EncoderOutput& eo) {
    const int64_t B = eo.mu.dim(0);
    double acc = 0.0;
    for (size_t i = 0; i < eo.mu.data.size(); ++i) {
        double mu = eo.mu.data[i];
        double ls = eo.log_sigma.data[i];
        acc += mu * mu + std::exp(2.0 * ls) - 1.0 - 2.0 * ls;
    }
    return 0.5 * acc / static_cast<double>(B);
}

Var kl_loss_g(Graph& g, Var mu, Var log_sigma) {
    const int64_t B = mu.value().dim(0);
    Var mu2 = g.mul(mu, mu);
    Var sig2 = g.exp(g.scale(log_sigma, 2.0));
    Var elem = g.sub(g.add_scalar(g.add(mu2, sig2), -1.0), g.scale(log_sigma, 2.0));
    return g.scale(g.sum(elem), 0.5 / static_cast<double>(B));
}

// ---------------------------------------------------------------------------
// discriminator
// ---------------------------------------------------------------------------

Discriminator::Discriminator(int sample_rate, uint64_t seed, int64_t channels)
    : channels_(channels) {
    (void)sample_rate;
    Rng rng(Rng::derive(seed, 0xd15c));
    const auto& sizes = audio::multires_frame_sizes();
    for (size_t r = 0; r < sizes.size(); ++r) {
        int64_t bins = sizes[r] / 2 + 1;
        std::string pfx = "disc.res" + std::to_string(r);
        params_.add(pfx + ".w1", init_conv({channels_, bins, 3}, bins * 3, rng));
        params_.add(pfx + ".b1", Tensor({channels_}));
        params_.add(pfx + ".w2", init_conv({channels_, channels_, 3}, channels_ * 3, rng));
        params_.add(pfx + ".b2", Tensor({channels_}));
        params_.add(pfx + ".w3", init_conv({1, channels_, 3}, channels_ * 3, rng));
        params_.add(pfx + ".b3", Tensor({1}));
    }
}

Var Discriminator::score_g(Graph& g, const BoundParams& p, Var mag, size_t res_index) const {
    std::string pfx = "disc.res" + std::to_string(res_index);
    // compress the wide dynamic range of magnitudes before the conv stack
    Var h = g.custom(
        "log1p", {mag},
        [&] {
            Tensor t;
            t.shape = mag.value().shape;
            t.data.resize(mag.value().data.size());
            for (size_t i = 0; i < t.data.size(); ++i)
                t.data[i] = std::log1p(mag.value().data[i]);
            return t;
        }(),
        CustomRule{
            [](const Tensor&, const std::vector<double>& go,
               const std::vector<const Tensor*>& ins,
               const std::vector<std::vector<double>*>& gins) {
                if (!gins[0]) return;
                for (size_t i = 0; i < go.size(); ++i)
                    (*gins[0])[i] += go[i] / (1.0 + ins[0]->data[i]);
            },
            [](const Tensor&, const std::vector<const Tensor*>& ins,
               const std::vector<const std::vector<double>*>& tins, std::vector<double>& out) {
                for (size_t i = 0; i < out.size(); ++i)
                    out[i] = (*tins[0])[i] / (1.0 + ins[0]->data[i]);
            }});
    h = g.leaky_relu(g.conv1d(h, p.at(pfx + ".w1"), p.at(pfx + ".b1"), 1, 1), 0.2);
    h = g.leaky_relu(g.conv1d(h, p.at(pfx + ".w2"), p.at(pfx + ".b2"), 2, 1), 0.2);
    return g.conv1d(h, p.at(pfx + ".w3"), p.at(pfx + ".b3"), 1, 1);
}

namespace {

// resolutions whose frame fits the signal; scale averages run over these
std::vector<size_t> applicable_scales(int64_t T) {
    std::vector<size_t> out;
    const auto& sizes = audio::multires_frame_sizes();
    for (size_t r = 0; r < sizes.size(); ++r)
        if (sizes[r] <= T) out.push_back(r);
    if (out.empty()) throw Error(ErrorKind::domain, "signal shorter than every STFT resolution");
    return out;
}

// constant [B, bins, frames] magnitude tensor for a waveform batch
Tensor mag_batch(const std::vector<audio::Waveform>& batch, const audio::StftPlan& plan) {
    audio::Spectrogram first = audio::stft(batch[0], plan);
    int64_t B = static_cast<int64_t>(batch.size());
    Tensor out({B, first.bins, first.frames});
    for (int64_t b = 0; b < B; ++b) {
        audio::Spectrogram s = b == 0 ? std::move(first) : audio::stft(batch[static_cast<size_t>(b)], plan);
        for (int64_t fr = 0; fr < s.frames; ++fr)
            for (int64_t bin = 0; bin < s.bins; ++bin)
                out.data[static_cast<size_t>((b * s.bins + bin) * s.frames + fr)] =
                    std::abs(s.at(fr, bin));
    }
    return out;
}

} // namespace

std::vector<Tensor> Discriminator::scores(const std::vector<audio::Waveform>& batch) const {
    std::vector<Tensor> out;
    Graph g;
    BoundParams p = bind_params(g, params_, false);
    const auto& sizes = audio::multires_frame_sizes();
    for (size_t r : applicable_scales(batch[0].size())) {
        audio::StftPlan plan = audio::StftPlan::make(sizes[r]);
        Var s = score_g(g, p, g.constant(mag_batch(batch, plan)), r);
        out.push_back(g.value(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// custom spectral ops
// ---------------------------------------------------------------------------

namespace {

// per-row spectra cached at forward time for the backward/tangent closures
struct StftCache {
    audio::StftPlan plan;
    std::vector<audio::Spectrogram> rows;
};

audio::Spectrogram stft_row(const Tensor& wave, int64_t row, const audio::StftPlan& plan,
                            int sr = 8000) {
    audio::Waveform w;
    w.sample_rate = sr;
    int64_t T = wave.shape.back();
    w.samples.assign(wave.data.begin() + row * T, wave.data.begin() + (row + 1) * T);
    return audio::stft(w, plan);
}

// accumulate dL/dwave for one frame given complex bin gradients (bins 0..N/2)
void frame_adjoint(const std::vector<std::complex<double>>& bin_grad,
                   const audio::StftPlan& plan, double* wave_grad) {
    const int64_t n = plan.frame_size;
    std::vector<std::complex<double>> buf(static_cast<size_t>(n), {0.0, 0.0});
    for (int64_t b = 0; b <= n / 2; ++b) buf[static_cast<size_t>(b)] = bin_grad[static_cast<size_t>(b)];
    audio::fft(buf, true); // inverse, scaled by 1/n
    for (int64_t i = 0; i < n; ++i)
        wave_grad[i] += buf[static_cast<size_t>(i)].real() * static_cast<double>(n) *
                        plan.window[static_cast<size_t>(i)];
}

// STFT of a tangent direction for one row (linear op)
audio::Spectrogram stft_row_dir(const std::vector<double>& dir, int64_t row, int64_t T,
                                const audio::StftPlan& plan) {
    audio::Waveform w;
    w.sample_rate = 8000;
    w.samples.assign(dir.begin() + row * T, dir.begin() + (row + 1) * T);
    return audio::stft(w, plan);
}

} // namespace

Var stft_mag_op(Graph& g, Var wave, const audio::StftPlan& plan) {
    const Tensor& tw = wave.value();
    check(tw.rank() == 2, ErrorKind::shape, "stft_mag_op expects [B,T]");
    int64_t B = tw.dim(0), T = tw.dim(1);
    auto cache = std::make_shared<StftCache>();
    cache->plan = plan;
    for (int64_t b = 0; b < B; ++b) cache->rows.push_back(stft_row(tw, b, plan));
    int64_t frames = cache->rows[0].frames, bins = cache->rows[0].bins;
    Tensor out({B, bins, frames});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t fr = 0; fr < frames; ++fr)
            for (int64_t bin = 0; bin < bins; ++bin)
                out.data[static_cast<size_t>((b * bins + bin) * frames + fr)] =
                    std::abs(cache->rows[static_cast<size_t>(b)].at(fr, bin));

    CustomRule rule;
    rule.backward = [cache, B, T, frames, bins](const Tensor& out_value,
                                                const std::vector<double>& go,
                                                const std::vector<const Tensor*>&,
                                                const std::vector<std::vector<double>*>& gins) {
        if (!gins[0]) return;
        const double eps = 1e-30;
        std::vector<std::complex<double>> bin_grad(static_cast<size_t>(bins));
        for (int64_t b = 0; b < B; ++b) {
            const auto& spec = cache->rows[static_cast<size_t>(b)];
            for (int64_t fr = 0; fr < frames; ++fr) {
                for (int64_t bin = 0; bin < bins; ++bin) {
                    double m = out_value.data[static_cast<size_t>((b * bins + bin) * frames + fr)];
                    double gm = go[static_cast<size_t>((b * bins + bin) * frames + fr)];
                    if (m < eps || gm == 0.0) {
                        bin_grad[static_cast<size_t>(bin)] = {0.0, 0.0};
                    } else {
                        const auto& X = spec.at(fr, bin);
                        bin_grad[static_cast<size_t>(bin)] = {gm * X.real() / m, gm * X.imag() / m};
                    }
                }
                frame_adjoint(bin_grad, cache->plan,
                              gins[0]->data() + b * T + fr * cache->plan.hop);
            }
        }
    };
    rule.tangent = [cache, B, T, frames, bins](const Tensor& out_value,
                                               const std::vector<const Tensor*>&,
                                               const std::vector<const std::vector<double>*>& tins,
                                               std::vector<double>& out_tan) {
        const double eps = 1e-30;
        for (int64_t b = 0; b < B; ++b) {
            audio::Spectrogram ts = stft_row_dir(*tins[0], b, T, cache->plan);
            const auto& spec = cache->rows[static_cast<size_t>(b)];
            for (int64_t fr = 0; fr < frames; ++fr)
                for (int64_t bin = 0; bin < bins; ++bin) {
                    double m = out_value.data[static_cast<size_t>((b * bins + bin) * frames + fr)];
                    double tv = 0.0;
                    if (m >= eps) {
                        const auto& X = spec.at(fr, bin);
                        const auto& tX = ts.at(fr, bin);
                        tv = (X.real() * tX.real() + X.imag() * tX.imag()) / m;
                    }
                    out_tan[static_cast<size_t>((b * bins + bin) * frames + fr)] = tv;
                }
        }
    };
    return g.custom("stft_mag", {wave}, std::move(out), std::move(rule));
}

Var multires_spec_op(Graph& g, Var wave, const std::vector<audio::Waveform>& targets,
                     const std::vector<double>& weights, audio::SpecDistance mode) {
    const Tensor& tw = wave.value();
    check(tw.rank() == 2, ErrorKind::shape, "multires_spec_op expects [B,T]");
    int64_t B = tw.dim(0), T = tw.dim(1);
    check(static_cast<int64_t>(targets.size()) == B, ErrorKind::shape,
          "multires_spec_op: one target per batch row expected");
    for (const auto& t : targets)
        check(t.size() == T, ErrorKind::shape, "multires_spec_op: target length mismatch");
    const auto& sizes = audio::multires_frame_sizes();
    check(weights.size() == sizes.size(), ErrorKind::config,
          "multires_spec_op: one weight per resolution expected");

    struct ResCache {
        audio::StftPlan plan;
        double weight;
        std::vector<audio::Spectrogram> wave_rows, target_rows;
    };
    auto caches = std::make_shared<std::vector<ResCache>>();
    const double eps = 1e-8;
    double total = 0.0;
    for (size_t r = 0; r < sizes.size(); ++r) {
        if (weights[r] == 0.0) continue;
        if (sizes[r] > T) continue; // no complete frame at this resolution
        ResCache rc;
        rc.plan = audio::StftPlan::make(sizes[r]);
        rc.weight = weights[r];
        for (int64_t b = 0; b < B; ++b) {
            rc.wave_rows.push_back(stft_row(tw, b, rc.plan));
            rc.target_rows.push_back(audio::stft(targets[static_cast<size_t>(b)], rc.plan));
        }
        for (int64_t b = 0; b < B; ++b) {
            const auto& sw = rc.wave_rows[static_cast<size_t>(b)];
            const auto& st = rc.target_rows[static_cast<size_t>(b)];
            double d = 0.0;
            if (mode == audio::SpecDistance::complex_l1) {
                for (size_t i = 0; i < sw.data.size(); ++i) {
                    d += std::abs(sw.data[i].real() - st.data[i].real());
                    d += std::abs(sw.data[i].imag() - st.data[i].imag());
                }
            } else {
                for (size_t i = 0; i < sw.data.size(); ++i) {
                    double ma = std::abs(sw.data[i]);
                    double mb = std::abs(st.data[i]);
                    d += std::abs(ma - mb);
                    d += std::abs(std::log(ma + eps) - std::log(mb + eps));
                }
            }
            total += rc.weight * d;
        }
        caches->push_back(std::move(rc));
    }

    auto sign = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };

    CustomRule rule;
    rule.backward = [caches, B, T, mode, eps, sign](const Tensor&, const std::vector<double>& go,
                                                    const std::vector<const Tensor*>&,
                                                    const std::vector<std::vector<double>*>& gins) {
        if (!gins[0]) return;
        const double g0 = go[0];
        for (const auto& rc : *caches) {
            std::vector<std::complex<double>> bin_grad(static_cast<size_t>(rc.plan.frame_size / 2 + 1));
            for (int64_t b = 0; b < B; ++b) {
                const auto& sw = rc.wave_rows[static_cast<size_t>(b)];
                const auto& st = rc.target_rows[static_cast<size_t>(b)];
                for (int64_t fr = 0; fr < sw.frames; ++fr) {
                    for (int64_t bin = 0; bin < sw.bins; ++bin) {
                        const auto& X = sw.at(fr, bin);
                        const auto& Y = st.at(fr, bin);
                        double gr, gi;
                        if (mode == audio::SpecDistance::complex_l1) {
                            gr = sign(X.real() - Y.real());
                            gi = sign(X.imag() - Y.imag());
                        } else {
                            double ma = std::abs(X), mb = std::abs(Y);
                            double dmag = sign(ma - mb) +
                                          sign(std::log(ma + eps) - std::log(mb + eps)) / (ma + eps);
                            if (ma < 1e-30) {
                                gr = gi = 0.0;
                            } else {
                                gr = dmag * X.real() / ma;
                                gi = dmag * X.imag() / ma;
                            }
                        }
                        bin_grad[static_cast<size_t>(bin)] = {g0 * rc.weight * gr,
                                                              g0 * rc.weight * gi};
                    }
                    frame_adjoint(bin_grad, rc.plan, gins[0]->data() + b * T + fr * rc.plan.hop);
                }
            }
        }
    };
    rule.tangent = [caches, B, T, mode, eps, sign](const Tensor&,
                                                   const std::vector<const Tensor*>&,
                                                   const std::vector<const std::vector<double>*>& tins,
                                                   std::vector<double>& out_tan) {
        double acc = 0.0;
        for (const auto& rc : *caches)
            for (int64_t b = 0; b < B; ++b) {
                audio::Spectrogram ts = stft_row_dir(*tins[0], b, T, rc.plan);
                const auto& sw = rc.wave_rows[static_cast<size_t>(b)];
                const auto& st = rc.target_rows[static_cast<size_t>(b)];
                for (size_t i = 0; i < sw.data.size(); ++i) {
                    const auto& X = sw.data[i];
                    const auto& Y = st.data[i];
                    const auto& tX = ts.data[i];
                    if (mode == audio::SpecDistance::complex_l1) {
                        acc += rc.weight * (sign(X.real() - Y.real()) * tX.real() +
                                            sign(X.imag() - Y.imag()) * tX.imag());
                    } else {
                        double ma = std::abs(X), mb = std::abs(Y);
                        if (ma < 1e-30) continue;
                        double tmag = (X.real() * tX.real() + X.imag() * tX.imag()) / ma;
                        acc += rc.weight *
                               (sign(ma - mb) +
                                sign(std::log(ma + eps) - std::log(mb + eps)) / (ma + eps)) *
                               tmag;
                    }
                }
            }
        out_tan[0] = acc;
    };
    return g.custom("multires_spec", {wave}, Tensor::scalar(total), std::move(rule));
}

// ---------------------------------------------------------------------------
// training losses
// ---------------------------------------------------------------------------

GeneratorLoss generator_loss_g(Graph& g, const Vae& vae, const BoundParams& vp,
                               const Discriminator& disc, const BoundParams& dp_const,
                               const Tensor& x, const Tensor& eps) {
    const VaeConfig& cfg = vae.config();
    Var xin = g.constant(x);
    auto [mu, ls] = vae.encode_g(g, vp, xin);
    Var z = reparameterize_g(g, mu, ls, eps);
    Var xhat = vae.decode_g(g, vp, z);

    Var diff = g.sub(xhat, xin);
    Var recon = g.mean(g.mul(diff, diff));
    Var kl = kl_loss_g(g, mu, ls);

    // flatten [B,1,T] -> [B,T] for the waveform-domain losses
    int64_t B = x.dim(0), T = x.dim(2);
    Var flat = g.reshape(xhat, {B, T});
    std::vector<audio::Waveform> targets;
    for (int64_t b = 0; b < B; ++b) {
        audio::Waveform w;
        w.sample_rate = cfg.sample_rate;
        w.samples.assign(x.data.begin() + b * T, x.data.begin() + (b + 1) * T);
        targets.push_back(std::move(w));
    }
    Var spec = multires_spec_op(g, flat, targets, cfg.spec_weights, cfg.spec_mode);

    const auto& sizes = audio::multires_frame_sizes();
    std::vector<size_t> scales = applicable_scales(T);
    Var adv;
    bool first = true;
    for (size_t r : scales) {
        Var mag = stft_mag_op(g, flat, audio::StftPlan::make(sizes[r]));
        Var s = disc.score_g(g, dp_const, mag, r);
        Var term = g.mean(g.mul(g.add_scalar(s, -1.0), g.add_scalar(s, -1.0)));
        adv = first ? term : g.add(adv, term);
        first = false;
    }
    adv = g.scale(adv, 1.0 / static_cast<double>(scales.size()));

    Var elbo = g.add(recon, g.scale(kl, cfg.beta));
    Var total;
    if (cfg.kl_weight_scales_recon)
        total = g.scale(elbo, cfg.lambda_kl);
    else
        total = g.add(recon, g.scale(kl, cfg.lambda_kl * cfg.beta));
    total = g.add(total, g.scale(spec, cfg.lambda_spec));
    total = g.add(total, g.scale(adv, cfg.lambda_adv));
    return {total, recon, kl, spec, adv};
}

Var discriminator_loss_g(Graph& g, const Discriminator& disc, const BoundParams& dp,
                         const std::vector<audio::Waveform>& real,
                         const std::vector<audio::Waveform>& fake) {
    const auto& sizes = audio::multires_frame_sizes();
    std::vector<size_t> scales = applicable_scales(real[0].size());
    Var loss;
    bool first = true;
    for (size_t r : scales) {
        audio::StftPlan plan = audio::StftPlan::make(sizes[r]);
        Var sr = disc.score_g(g, dp, g.constant(mag_batch(real, plan)), r);
        Var sf = disc.score_g(g, dp, g.constant(mag_batch(fake, plan)), r);
        Var term = g.add(g.mean(g.mul(g.add_scalar(sr, -1.0), g.add_scalar(sr, -1.0))),
                         g.mean(g.mul(sf, sf)));
        loss = first ? term : g.add(loss, term);
        first = false;
    }
    return g.scale(loss, 1.0 / static_cast<double>(scales.size()));
}

std::pair<double, double> adversarial_losses(const std::vector<audio::Waveform>& real,
                                             const std::vector<audio::Waveform>& fake,
                                             const Discriminator& disc) {
    std::vector<Tensor> sr = disc.scores(real);
    std::vector<Tensor> sf = disc.scores(fake);
    double l_adv = 0.0, l_d = 0.0;
    for (size_t r = 0; r < sr.size(); ++r) {
        double adv = 0.0, dr = 0.0, df = 0.0;
        for (double v : sf[r].data) {
            adv += (v - 1.0) * (v - 1.0);
            df += v * v;
        }
        for (double v : sr[r].data) dr += (v - 1.0) * (v - 1.0);
        l_adv += adv / static_cast<double>(sf[r].numel());
        l_d += dr / static_cast<double>(sr[r].numel()) + df / static_cast<double>(sf[r].numel());
    }
    double n = static_cast<double>(sr.size());
    return {l_adv / n, l_d / n};
}

double vae_total_loss(const Vae& vae, const std::vector<audio::Waveform>& x,
                      const std::vector<audio::Waveform>& xhat, const EncoderOutput& eo,
                      const Discriminator& disc) {
    const VaeConfig& cfg = vae.config();
    check(x.size() == xhat.size(), ErrorKind::shape, "vae_total_loss: batch size mismatch");
    double recon = 0.0;
    int64_t count = 0;
    for (size_t b = 0; b < x.size(); ++b) {
        check(x[b].size() == xhat[b].size(), ErrorKind::shape, "vae_total_loss: length mismatch");
        for (int64_t i = 0; i < x[b].size(); ++i) {
            double d = x[b].samples[static_cast<size_t>(i)] - xhat[b].samples[static_cast<size_t>(i)];
            recon += d * d;
            ++count;
        }
    }
    recon /= static_cast<double>(count);
    double kl = kl_loss(eo);
    double spec = 0.0;
    for (size_t b = 0; b < x.size(); ++b)
        spec += audio::multires_spec_distance(x[b], xhat[b], cfg.spec_weights, cfg.spec_mode);
    double adv = adversarial_losses(x, xhat, disc).first;

    double elbo = recon + cfg.beta * kl;
    double total = cfg.kl_weight_scales_recon ? cfg.lambda_kl * elbo
                                              : recon + cfg.lambda_kl * cfg.beta * kl;
    return total + cfg.lambda_spec * spec + cfg.lambda_adv * adv;
}

} // namespace latgen::vae

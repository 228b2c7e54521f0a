#pragma once

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include "latgen/rng.hpp"
#include "latgen/tensor.hpp"

namespace latgen::audio {

// Single-channel sample buffer. Samples live in [-1, 1]; mixing ops clip and
// record how many samples were clamped.
struct Waveform {
    std::vector<double> samples;
    int sample_rate = 8000;
    size_t clip_count = 0;

    Waveform() = default;
    Waveform(std::vector<double> s, int sr) : samples(std::move(s)), sample_rate(sr) {}

    int64_t size() const { return static_cast<int64_t>(samples.size()); }
    double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
    double energy() const;
};

// --- WAV files (16-bit PCM mono RIFF) ---------------------------------------

int16_t quantize16(double x);
double dequantize16(int16_t v);

Waveform read_wav(const std::string& path);
void write_wav(const std::string& path, const Waveform& w);

// --- STFT --------------------------------------------------------------------

// Periodic Hann analysis plan; hop is fixed at frame_size/4.
struct StftPlan {
    int64_t frame_size = 0;
    int64_t hop = 0;
    std::vector<double> window;

    static StftPlan make(int64_t frame_size);
};

// Frame sizes used by the multi-resolution losses, 32 .. 2048.
const std::vector<int64_t>& multires_frame_sizes();

struct Spectrogram {
    int64_t frames = 0;
    int64_t bins = 0; // frame_size/2 + 1
    std::vector<std::complex<double>> data;

    std::complex<double>& at(int64_t f, int64_t b) {
        return data[static_cast<size_t>(f * bins + b)];
    }
    const std::complex<double>& at(int64_t f, int64_t b) const {
        return data[static_cast<size_t>(f * bins + b)];
    }
};

Spectrogram stft(const Waveform& w, const StftPlan& plan);

enum class SpecDistance {
    complex_l1, // L1 over real and imaginary parts (the default)
    mag_log,    // L1 of magnitudes plus L1 of log magnitudes
};

// Sum over resolutions of weight_i * distance(STFT_i(x), STFT_i(xhat)).
double multires_spec_distance(const Waveform& x, const Waveform& xhat,
                              const std::vector<double>& weights,
                              SpecDistance mode = SpecDistance::complex_l1);

// radix-2 in-place FFT; size must be a power of two. inverse divides by n.
void fft(std::vector<std::complex<double>>& a, bool inverse);
std::vector<double> hann_periodic(int64_t n);

// --- mixing ------------------------------------------------------------------

// Scales noise so that 10*log10(E_clean / E_scaled_noise) == snr_db, then adds.
// Returns {mixture (clipped, with clip_count), scaled_noise}.
std::pair<Waveform, Waveform> mix_at_snr(const Waveform& clean, const Waveform& noise,
                                         double snr_db);

// Sample-wise sum clipped to [-1,1] with a recorded clip count.
Waveform mix_add(const Waveform& a, const Waveform& b);
Waveform scale_wave(const Waveform& w, double c);

struct RirKernel {
    std::vector<double> taps; // taps[0] is the direct-path peak
    double decay_time = 0.0;  // T60 seconds
};

// Direct path plus an exponentially decaying noise tail reaching -60 dB at t60.
RirKernel synth_rir(double t60, int sample_rate, Rng& rng, int64_t direct_delay = 0);

// Full convolution truncated to the input length.
Waveform convolve_rir(const Waveform& w, const RirKernel& rir);

// tanh waveshaper; models the loudspeaker nonlinearity in the echo path
Waveform soft_clip(const Waveform& w, double drive);

// --- synthetic corpus ----------------------------------------------------------

struct CorpusConfig {
    int sample_rate = 8000;
    double clip_seconds = 0.5;
    int num_speakers = 6;
    int utterances_per_speaker = 4;
    int num_event_classes = 4;
    int events_per_class = 6;
    double amplitude = 0.25;
};

struct CorpusItem {
    Waveform wave;
    std::string kind; // "speech" or "event"
    int speaker_id = -1;
    int event_class = -1;
    int utterance = -1;
    std::string path;
};

struct Corpus {
    CorpusConfig config;
    std::vector<CorpusItem> items;

    std::vector<const CorpusItem*> speech() const;
    std::vector<const CorpusItem*> speech_by(int speaker_id) const;
    std::vector<const CorpusItem*> events() const;
    std::vector<const CorpusItem*> events_by(int event_class) const;
};

// "Speech" items are harmonic tone complexes with a per-speaker fundamental
// and vibrato; "event" items are band-filtered noise bursts with a per-class
// spectral envelope. Deterministic for a given seed.
Corpus synth_corpus(const CorpusConfig& cfg, uint64_t seed);

// WAV files plus a line-delimited manifest ({path, kind, speaker_id,
// event_class, duration} records).
void write_corpus(const Corpus& corpus, const std::string& dir);
Corpus read_corpus(const std::string& dir);

// mean spectral centroid in Hz (1024-point frames); test/eval helper
double spectral_centroid(const Waveform& w);

} // namespace latgen::audio

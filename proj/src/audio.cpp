#include "latgen/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace latgen::audio {

namespace {

constexpr double kPi = 3.14159265358979323846;

void check(bool ok, ErrorKind kind, const std::string& msg) {
    if (!ok) throw Error(kind, msg);
}

double clip_sample(double v, size_t& clips) {
    if (v > 1.0) {
        ++clips;
        return 1.0;
    }
    if (v < -1.0) {
        ++clips;
        return -1.0;
    }
    return v;
}

} // namespace

double Waveform::energy() const {
    double e = 0.0;
    for (double s : samples) e += s * s;
    return e;
}

// ---------------------------------------------------------------------------
// WAV I/O
// ---------------------------------------------------------------------------

int16_t quantize16(double x) {
    double v = std::round(x * 32767.0);
    if (v > 32767.0) v = 32767.0;
    if (v < -32768.0) v = -32768.0;
    return static_cast<int16_t>(v);
}

double dequantize16(int16_t v) { return static_cast<double>(v) / 32767.0; }

namespace {

void put_u32(std::string& s, uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u16(std::string& s, uint16_t v) {
    for (int i = 0; i < 2; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const char* p) {
    uint32_t v = 0;
    std::memcpy(&v, p, 4);
    return v;
}
uint16_t get_u16(const char* p) {
    uint16_t v = 0;
    std::memcpy(&v, p, 2);
    return v;
}

} // namespace

void write_wav(const std::string& path, const Waveform& w) {
    const uint32_t n = static_cast<uint32_t>(w.samples.size());
    const uint32_t data_bytes = n * 2;
    std::string buf;
    buf.reserve(44 + data_bytes);
    buf += "RIFF";
    put_u32(buf, 36 + data_bytes);
    buf += "WAVE";
    buf += "fmt ";
    put_u32(buf, 16);
    put_u16(buf, 1); // PCM
    put_u16(buf, 1); // mono
    put_u32(buf, static_cast<uint32_t>(w.sample_rate));
    put_u32(buf, static_cast<uint32_t>(w.sample_rate) * 2);
    put_u16(buf, 2);  // block align
    put_u16(buf, 16); // bits
    buf += "data";
    put_u32(buf, data_bytes);
    for (double s : w.samples) {
        int16_t q = quantize16(s);
        buf.push_back(static_cast<char>(q & 0xff));
        buf.push_back(static_cast<char>((q >> 8) & 0xff));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    check(f.good(), ErrorKind::io, "cannot open " + path + " for writing");
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    check(f.good(), ErrorKind::io, "short write to " + path);
}

Waveform read_wav(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    check(f.good(), ErrorKind::io, "cannot open " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    check(buf.size() >= 44, ErrorKind::io, path + ": truncated WAV header");
    check(buf.compare(0, 4, "RIFF") == 0 && buf.compare(8, 4, "WAVE") == 0, ErrorKind::io,
          path + ": not a RIFF/WAVE file");

    size_t pos = 12;
    int sample_rate = 0;
    bool fmt_seen = false;
    std::vector<double> samples;
    bool data_seen = false;
    while (pos + 8 <= buf.size()) {
        std::string id = buf.substr(pos, 4);
        uint32_t sz = get_u32(buf.data() + pos + 4);
        pos += 8;
        check(pos + sz <= buf.size(), ErrorKind::io, path + ": truncated chunk " + id);
        if (id == "fmt ") {
            check(sz >= 16, ErrorKind::io, path + ": short fmt chunk");
            uint16_t format = get_u16(buf.data() + pos);
            uint16_t channels = get_u16(buf.data() + pos + 2);
            sample_rate = static_cast<int>(get_u32(buf.data() + pos + 4));
            uint16_t bits = get_u16(buf.data() + pos + 14);
            check(format == 1, ErrorKind::io, path + ": only PCM supported");
            check(channels == 1, ErrorKind::io, path + ": only mono supported");
            check(bits == 16, ErrorKind::io, path + ": only 16-bit supported");
            fmt_seen = true;
        } else if (id == "data") {
            check(fmt_seen, ErrorKind::io, path + ": data chunk before fmt");
            samples.resize(sz / 2);
            for (size_t i = 0; i < samples.size(); ++i) {
                int16_t q;
                std::memcpy(&q, buf.data() + pos + 2 * i, 2);
                samples[i] = dequantize16(q);
            }
            data_seen = true;
        }
        pos += sz + (sz & 1); // chunks are word-aligned
    }
    check(fmt_seen && data_seen, ErrorKind::io, path + ": missing fmt or data chunk");
    return Waveform(std::move(samples), sample_rate);
}

// ---------------------------------------------------------------------------
// FFT / STFT
// ---------------------------------------------------------------------------

void fft(std::vector<std::complex<double>>& a, bool inverse) {
    const size_t n = a.size();
    check(n >= 1 && (n & (n - 1)) == 0, ErrorKind::config, "fft size must be a power of two");
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        double ang = 2.0 * kPi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t j = 0; j < len / 2; ++j) {
                std::complex<double> u = a[i + j];
                std::complex<double> v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
    if (inverse)
        for (auto& x : a) x /= static_cast<double>(n);
}

std::vector<double> hann_periodic(int64_t n) {
    std::vector<double> w(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        w[static_cast<size_t>(i)] =
            0.5 - 0.5 * std::cos(2.0 * kPi * static_cast<double>(i) / static_cast<double>(n));
    return w;
}

StftPlan StftPlan::make(int64_t frame_size) {
    const auto& allowed = multires_frame_sizes();
    check(std::find(allowed.begin(), allowed.end(), frame_size) != allowed.end(),
          ErrorKind::config, "frame size " + std::to_string(frame_size) + " not supported");
    StftPlan p;
    p.frame_size = frame_size;
    p.hop = frame_size / 4;
    p.window = hann_periodic(frame_size);
    return p;
}

const std::vector<int64_t>& multires_frame_sizes() {
    static const std::vector<int64_t> v{32, 64, 128, 256, 512, 1024, 2048};
    return v;
}

Spectrogram stft(const Waveform& w, const StftPlan& plan) {
    const int64_t n = plan.frame_size;
    const int64_t T = w.size();
    check(T >= n, ErrorKind::domain,
          "signal shorter than one frame (" + std::to_string(T) + " < " + std::to_string(n) + ")");
    Spectrogram out;
    out.frames = 1 + (T - n) / plan.hop;
    out.bins = n / 2 + 1;
    out.data.resize(static_cast<size_t>(out.frames * out.bins));
    std::vector<std::complex<double>> buf(static_cast<size_t>(n));
    for (int64_t fr = 0; fr < out.frames; ++fr) {
        const double* x = w.samples.data() + fr * plan.hop;
        for (int64_t i = 0; i < n; ++i)
            buf[static_cast<size_t>(i)] = {x[i] * plan.window[static_cast<size_t>(i)], 0.0};
        fft(buf, false);
        for (int64_t b = 0; b < out.bins; ++b) out.at(fr, b) = buf[static_cast<size_t>(b)];
    }
    return out;
}

double multires_spec_distance(const Waveform& x, const Waveform& xhat,
                              const std::vector<double>& weights, SpecDistance mode) {
    check(x.size() == xhat.size(), ErrorKind::shape, "waveform length mismatch");
    check(x.sample_rate == xhat.sample_rate, ErrorKind::shape, "sample rate mismatch");
    const auto& sizes = multires_frame_sizes();
    check(weights.size() == sizes.size(), ErrorKind::config,
          "expected " + std::to_string(sizes.size()) + " resolution weights");
    double total = 0.0;
    for (size_t i = 0; i < sizes.size(); ++i) {
        if (weights[i] == 0.0) continue;
        if (sizes[i] > x.size()) continue; // no complete frame at this resolution
        StftPlan plan = StftPlan::make(sizes[i]);
        Spectrogram a = stft(x, plan);
        Spectrogram b = stft(xhat, plan);
        double d = 0.0;
        if (mode == SpecDistance::complex_l1) {
            for (size_t j = 0; j < a.data.size(); ++j) {
                d += std::abs(a.data[j].real() - b.data[j].real());
                d += std::abs(a.data[j].imag() - b.data[j].imag());
            }
        } else {
            const double eps = 1e-8;
            for (size_t j = 0; j < a.data.size(); ++j) {
                double ma = std::abs(a.data[j]);
                double mb = std::abs(b.data[j]);
                d += std::abs(ma - mb);
                d += std::abs(std::log(ma + eps) - std::log(mb + eps));
            }
        }
        total += weights[i] * d;
    }
    return total;
}

// ---------------------------------------------------------------------------
// mixing
// ---------------------------------------------------------------------------

std::pair<Waveform, Waveform> mix_at_snr(const Waveform& clean, const Waveform& noise,
                                         double snr_db) {
    check(clean.size() == noise.size(), ErrorKind::shape, "mix_at_snr: length mismatch");
    check(clean.sample_rate == noise.sample_rate, ErrorKind::shape,
          "mix_at_snr: sample rate mismatch");
    double ec = clean.energy();
    double en = noise.energy();
    check(ec > 0.0, ErrorKind::domain, "mix_at_snr: clean signal has zero energy");
    check(en > 0.0, ErrorKind::domain, "mix_at_snr: noise signal has zero energy");
    double scale = std::sqrt(ec / (en * std::pow(10.0, snr_db / 10.0)));
    Waveform scaled = scale_wave(noise, scale);
    Waveform mix = mix_add(clean, scaled);
    return {std::move(mix), std::move(scaled)};
}

Waveform mix_add(const Waveform& a, const Waveform& b) {
    check(a.size() == b.size(), ErrorKind::shape, "mix_add: length mismatch");
    Waveform out;
    out.sample_rate = a.sample_rate;
    out.samples.resize(a.samples.size());
    out.clip_count = 0;
    for (size_t i = 0; i < a.samples.size(); ++i)
        out.samples[i] = clip_sample(a.samples[i] + b.samples[i], out.clip_count);
    return out;
}

Waveform scale_wave(const Waveform& w, double c) {
    Waveform out = w;
    out.clip_count = 0;
    for (double& s : out.samples) s *= c;
    return out;
}

RirKernel synth_rir(double t60, int sample_rate, Rng& rng, int64_t direct_delay) {
    check(t60 > 0.0, ErrorKind::config, "synth_rir: t60 must be positive");
    RirKernel rir;
    rir.decay_time = t60;
    int64_t tail = static_cast<int64_t>(std::ceil(t60 * sample_rate));
    rir.taps.assign(static_cast<size_t>(direct_delay + tail), 0.0);
    rir.taps[static_cast<size_t>(direct_delay)] = 1.0; // direct path
    // -60 dB envelope at t60
    const double rate = std::log(1000.0) / (t60 * sample_rate);
    for (int64_t n = 1; n < tail; ++n) {
        double env = 0.35 * std::exp(-rate * static_cast<double>(n));
        rir.taps[static_cast<size_t>(direct_delay + n)] = env * rng.normal();
    }
    return rir;
}

Waveform convolve_rir(const Waveform& w, const RirKernel& rir) {
    const int64_t T = w.size();
    const int64_t K = static_cast<int64_t>(rir.taps.size());
    Waveform out;
    out.sample_rate = w.sample_rate;
    out.samples.assign(static_cast<size_t>(T), 0.0);
    if (T == 0 || K == 0) return out;
    // direct form for small work, FFT overlap otherwise
    if (T * std::min(K, T) <= 1'000'000) {
        for (int64_t n = 0; n < T; ++n) {
            double acc = 0.0;
            int64_t kmax = std::min<int64_t>(K - 1, n);
            for (int64_t k = 0; k <= kmax; ++k) acc += rir.taps[static_cast<size_t>(k)] * w.samples[static_cast<size_t>(n - k)];
            out.samples[static_cast<size_t>(n)] = acc;
        }
        return out;
    }
    size_t fft_n = 1;
    while (fft_n < static_cast<size_t>(T + K - 1)) fft_n <<= 1;
    std::vector<std::complex<double>> A(fft_n), B(fft_n);
    for (int64_t i = 0; i < T; ++i) A[static_cast<size_t>(i)] = w.samples[static_cast<size_t>(i)];
    for (int64_t i = 0; i < K; ++i) B[static_cast<size_t>(i)] = rir.taps[static_cast<size_t>(i)];
    fft(A, false);
    fft(B, false);
    for (size_t i = 0; i < fft_n; ++i) A[i] *= B[i];
    fft(A, true);
    for (int64_t i = 0; i < T; ++i) out.samples[static_cast<size_t>(i)] = A[static_cast<size_t>(i)].real();
    return out;
}

Waveform soft_clip(const Waveform& w, double drive) {
    check(drive > 0.0, ErrorKind::config, "soft_clip: drive must be positive");
    Waveform out = w;
    for (double& s : out.samples) s = std::tanh(drive * s) / drive;
    return out;
}

// ---------------------------------------------------------------------------
// synthetic corpus
// ---------------------------------------------------------------------------

namespace {

// harmonic tone complex with vibrato and an attack/decay envelope
Waveform synth_speech(const CorpusConfig& cfg, int speaker, Rng& rng) {
    const int64_t T = static_cast<int64_t>(cfg.clip_seconds * cfg.sample_rate);
    const double f0 = 105.0 + 17.0 * speaker; // per-speaker fundamental
    const double vib_rate = rng.uniform(4.5, 6.0);
    const double vib_depth = rng.uniform(0.01, 0.02);
    const double vib_phase = rng.uniform(0.0, 2.0 * kPi);
    const int harmonics = 4 + static_cast<int>(rng.uniform_int(4));
    std::vector<double> phases(static_cast<size_t>(harmonics));
    std::vector<double> amps(static_cast<size_t>(harmonics));
    for (int h = 0; h < harmonics; ++h) {
        phases[static_cast<size_t>(h)] = rng.uniform(0.0, 2.0 * kPi);
        amps[static_cast<size_t>(h)] = 1.0 / (1.0 + h) * rng.uniform(0.7, 1.0);
    }
    const double am_rate = rng.uniform(1.5, 3.0);
    const double am_phase = rng.uniform(0.0, 2.0 * kPi);

    Waveform w;
    w.sample_rate = cfg.sample_rate;
    w.samples.resize(static_cast<size_t>(T));
    double phase_acc = 0.0;
    double peak = 0.0;
    for (int64_t n = 0; n < T; ++n) {
        double t = static_cast<double>(n) / cfg.sample_rate;
        double inst_f0 = f0 * (1.0 + vib_depth * std::sin(2.0 * kPi * vib_rate * t + vib_phase));
        phase_acc += 2.0 * kPi * inst_f0 / cfg.sample_rate;
        double s = 0.0;
        for (int h = 0; h < harmonics; ++h)
            s += amps[static_cast<size_t>(h)] *
                 std::sin(static_cast<double>(h + 1) * phase_acc + phases[static_cast<size_t>(h)]);
        // attack / release plus slow amplitude modulation
        double env = std::min(1.0, t / 0.03) * std::min(1.0, (cfg.clip_seconds - t) / 0.03);
        env *= 1.0 + 0.2 * std::sin(2.0 * kPi * am_rate * t + am_phase);
        s *= env;
        w.samples[static_cast<size_t>(n)] = s;
        peak = std::max(peak, std::abs(s));
    }
    if (peak > 0.0)
        for (double& s : w.samples) s *= cfg.amplitude / peak;
    return w;
}

// band-filtered noise burst; class k owns a frequency band
Waveform synth_event(const CorpusConfig& cfg, int event_class, Rng& rng) {
    const int64_t T = static_cast<int64_t>(cfg.clip_seconds * cfg.sample_rate);
    const double nyquist = cfg.sample_rate / 2.0;
    // class centers spread geometrically inside (0, nyquist)
    const double lo_hz = 300.0;
    const double hi_hz = nyquist * 0.85;
    const double frac = (event_class + 0.5) / cfg.num_event_classes;
    const double center = lo_hz * std::pow(hi_hz / lo_hz, frac);
    const double bw = center * 0.25;

    // white noise shaped by a narrow frequency-domain window
    size_t fft_n = 1;
    while (fft_n < static_cast<size_t>(T)) fft_n <<= 1;
    std::vector<std::complex<double>> spec(fft_n);
    for (size_t i = 0; i < fft_n; ++i) spec[i] = {rng.normal(), 0.0};
    fft(spec, false);
    for (size_t i = 0; i < fft_n; ++i) {
        double f = static_cast<double>(i <= fft_n / 2 ? i : fft_n - i) *
                   cfg.sample_rate / static_cast<double>(fft_n);
        double g = std::exp(-0.5 * std::pow((f - center) / bw, 2.0));
        spec[i] *= g;
    }
    fft(spec, true);

    Waveform w;
    w.sample_rate = cfg.sample_rate;
    w.samples.resize(static_cast<size_t>(T));
    // burst envelope: a few randomly placed bumps over a low floor
    int bursts = 2 + static_cast<int>(rng.uniform_int(3));
    std::vector<double> centers(static_cast<size_t>(bursts)), widths(static_cast<size_t>(bursts));
    for (int bidx = 0; bidx < bursts; ++bidx) {
        centers[static_cast<size_t>(bidx)] = rng.uniform(0.1, 0.9) * cfg.clip_seconds;
        widths[static_cast<size_t>(bidx)] = rng.uniform(0.03, 0.1);
    }
    double peak = 0.0;
    for (int64_t n = 0; n < T; ++n) {
        double t = static_cast<double>(n) / cfg.sample_rate;
        double env = 0.2;
        for (int bidx = 0; bidx < bursts; ++bidx) {
            double d = (t - centers[static_cast<size_t>(bidx)]) / widths[static_cast<size_t>(bidx)];
            env += std::exp(-0.5 * d * d);
        }
        double s = spec[static_cast<size_t>(n)].real() * env;
        w.samples[static_cast<size_t>(n)] = s;
        peak = std::max(peak, std::abs(s));
    }
    if (peak > 0.0)
        for (double& s : w.samples) s *= cfg.amplitude / peak;
    return w;
}

} // namespace

Corpus synth_corpus(const CorpusConfig& cfg, uint64_t seed) {
    check(cfg.num_speakers >= 1 && cfg.utterances_per_speaker >= 1, ErrorKind::config,
          "corpus needs at least one speaker and one utterance");
    check(cfg.num_event_classes >= 1 && cfg.events_per_class >= 1, ErrorKind::config,
          "corpus needs at least one event class and one event");
    check(cfg.clip_seconds > 0 && cfg.sample_rate > 0, ErrorKind::config,
          "corpus clip duration and sample rate must be positive");
    Corpus corpus;
    corpus.config = cfg;
    uint64_t stream = 0;
    char name[64];
    for (int s = 0; s < cfg.num_speakers; ++s)
        for (int u = 0; u < cfg.utterances_per_speaker; ++u) {
            Rng rng(Rng::derive(seed, stream++));
            CorpusItem item;
            item.kind = "speech";
            item.speaker_id = s;
            item.utterance = u;
            item.wave = synth_speech(cfg, s, rng);
            std::snprintf(name, sizeof(name), "speech_s%02d_u%02d.wav", s, u);
            item.path = name;
            corpus.items.push_back(std::move(item));
        }
    for (int c = 0; c < cfg.num_event_classes; ++c)
        for (int e = 0; e < cfg.events_per_class; ++e) {
            Rng rng(Rng::derive(seed, stream++));
            CorpusItem item;
            item.kind = "event";
            item.event_class = c;
            item.utterance = e;
            item.wave = synth_event(cfg, c, rng);
            std::snprintf(name, sizeof(name), "event_c%02d_e%02d.wav", c, e);
            item.path = name;
            corpus.items.push_back(std::move(item));
        }
    return corpus;
}

std::vector<const CorpusItem*> Corpus::speech() const {
    std::vector<const CorpusItem*> out;
    for (const auto& i : items)
        if (i.kind == "speech") out.push_back(&i);
    return out;
}

std::vector<const CorpusItem*> Corpus::speech_by(int speaker_id) const {
    std::vector<const CorpusItem*> out;
    for (const auto& i : items)
        if (i.kind == "speech" && i.speaker_id == speaker_id) out.push_back(&i);
    return out;
}

std::vector<const CorpusItem*> Corpus::events() const {
    std::vector<const CorpusItem*> out;
    for (const auto& i : items)
        if (i.kind == "event") out.push_back(&i);
    return out;
}

std::vector<const CorpusItem*> Corpus::events_by(int event_class) const {
    std::vector<const CorpusItem*> out;
    for (const auto& i : items)
        if (i.kind == "event" && i.event_class == event_class) out.push_back(&i);
    return out;
}

void write_corpus(const Corpus& corpus, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream manifest(dir + "/manifest.jsonl", std::ios::trunc);
    check(manifest.good(), ErrorKind::io, "cannot write manifest in " + dir);
    manifest << nlohmann::json{{"sample_rate", corpus.config.sample_rate},
                               {"clip_seconds", corpus.config.clip_seconds},
                               {"num_speakers", corpus.config.num_speakers},
                               {"utterances_per_speaker", corpus.config.utterances_per_speaker},
                               {"num_event_classes", corpus.config.num_event_classes},
                               {"events_per_class", corpus.config.events_per_class},
                               {"amplitude", corpus.config.amplitude}}
                 .dump()
             << "\n";
    for (const auto& item : corpus.items) {
        write_wav(dir + "/" + item.path, item.wave);
        manifest << nlohmann::json{{"path", item.path},
                                   {"kind", item.kind},
                                   {"speaker_id", item.speaker_id},
                                   {"event_class", item.event_class},
                                   {"utterance", item.utterance},
                                   {"duration", item.wave.duration()}}
                     .dump()
                 << "\n";
    }
}

Corpus read_corpus(const std::string& dir) {
    std::ifstream manifest(dir + "/manifest.jsonl");
    check(manifest.good(), ErrorKind::io, "cannot open manifest in " + dir);
    Corpus corpus;
    std::string line;
    bool header = true;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        check(!j.is_discarded(), ErrorKind::parse, "malformed manifest line: " + line);
        if (header) {
            corpus.config.sample_rate = j.at("sample_rate").get<int>();
            corpus.config.clip_seconds = j.at("clip_seconds").get<double>();
            corpus.config.num_speakers = j.at("num_speakers").get<int>();
            corpus.config.utterances_per_speaker = j.at("utterances_per_speaker").get<int>();
            corpus.config.num_event_classes = j.at("num_event_classes").get<int>();
            corpus.config.events_per_class = j.at("events_per_class").get<int>();
            corpus.config.amplitude = j.at("amplitude").get<double>();
            header = false;
            continue;
        }
        CorpusItem item;
        item.path = j.at("path").get<std::string>();
        item.kind = j.at("kind").get<std::string>();
        item.speaker_id = j.at("speaker_id").get<int>();
        item.event_class = j.at("event_class").get<int>();
        item.utterance = j.at("utterance").get<int>();
        item.wave = read_wav(dir + "/" + item.path);
        corpus.items.push_back(std::move(item));
    }
    return corpus;
}

double spectral_centroid(const Waveform& w) {
    StftPlan plan = StftPlan::make(1024);
    Spectrogram s = stft(w, plan);
    double num = 0.0, den = 0.0;
    for (int64_t fr = 0; fr < s.frames; ++fr)
        for (int64_t b = 0; b < s.bins; ++b) {
            double mag = std::abs(s.at(fr, b));
            double f = static_cast<double>(b) * w.sample_rate / static_cast<double>(plan.frame_size);
            num += f * mag;
            den += mag;
        }
    return den > 0.0 ? num / den : 0.0;
}

} // namespace latgen::audio

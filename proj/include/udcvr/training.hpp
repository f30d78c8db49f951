#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "udcvr/model.hpp"
#include "udcvr/serialize.hpp"

namespace udcvr {

struct TrainConfig {
    double lr = 4e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double adam_eps = 1e-8;
    double charbonnier_eps = 1e-3;
    std::size_t iterations = 1000;
    std::size_t crop = 32;  // 0 trains on full frames
    bool flip_augment = true;
    std::uint64_t seed = 0;
    std::size_t checkpoint_interval = 0;  // 0 disables intermediate checkpoints
    std::size_t grad_accumulation = 1;
    bool cosine_decay = false;

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("lr must be positive");
        if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0))
            throw ConfigError("Adam betas must lie in (0, 1)");
        if (!(adam_eps > 0.0) || !(charbonnier_eps > 0.0)) throw ConfigError("epsilons must be positive");
        if (grad_accumulation == 0) throw ConfigError("grad_accumulation must be at least 1");
    }

    /// Learning rate used at `iteration` (0-based).
    double lr_at(std::size_t iteration) const {
        if (!cosine_decay || iterations == 0) return lr;
        return 0.5 * lr * (1.0 + std::cos(std::numbers::pi * double(iteration) / double(iterations)));
    }

    void write(KeyValues& kv) const {
        kv.set("lr", lr);
        kv.set("beta1", beta1);
        kv.set("beta2", beta2);
        kv.set("adam_eps", adam_eps);
        kv.set("charbonnier_eps", charbonnier_eps);
        kv.set("iterations", std::uint64_t(iterations));
        kv.set("crop", std::uint64_t(crop));
        kv.set("flip_augment", flip_augment);
        kv.set("seed", seed);
        kv.set("checkpoint_interval", std::uint64_t(checkpoint_interval));
        kv.set("grad_accumulation", std::uint64_t(grad_accumulation));
        kv.set("cosine_decay", cosine_decay);
    }

    static TrainConfig read(const KeyValues& kv) {
        TrainConfig c;
        c.lr = kv.get_double("lr", c.lr);
        c.beta1 = kv.get_double("beta1", c.beta1);
        c.beta2 = kv.get_double("beta2", c.beta2);
        c.adam_eps = kv.get_double("adam_eps", c.adam_eps);
        c.charbonnier_eps = kv.get_double("charbonnier_eps", c.charbonnier_eps);
        c.iterations = kv.get_u64("iterations", c.iterations);
        c.crop = kv.get_u64("crop", c.crop);
        c.flip_augment = kv.get_bool("flip_augment", c.flip_augment);
        c.seed = kv.get_u64("seed", c.seed);
        c.checkpoint_interval = kv.get_u64("checkpoint_interval", c.checkpoint_interval);
        c.grad_accumulation = kv.get_u64("grad_accumulation", c.grad_accumulation);
        c.cosine_decay = kv.get_bool("cosine_decay", c.cosine_decay);
        c.validate();
        return c;
    }
};

/// Mean of sqrt((pred − target)² + ε²).
inline Var charbonnier_loss(const Var& pred, const Tensor& target, double eps) { return charbonnier(pred, target, eps); }

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    std::map<std::string, Tensor> m, v;
    std::uint64_t step = 0;
};

/// One bias-corrected Adam update of every parameter in `params` from its accumulated gradient.
inline void adam_step(ParamStore& params, AdamState& state, const TrainConfig& cfg, double lr) {
    for (const auto& path : params.paths())
        if (!params.get(path).has_grad()) throw ContractError("adam_step: parameter '" + path + "' has no gradient");
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, double(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, double(state.step));
    for (const auto& path : params.paths()) {
        Var& p = params.get(path);
        const auto g = p.grad().data();
        auto [mit, m_new] = state.m.try_emplace(path, Tensor::zeros(p.shape()));
        auto [vit, v_new] = state.v.try_emplace(path, Tensor::zeros(p.shape()));
        auto m = mit->second.data();
        auto v = vit->second.data();
        auto w = p.mutable_value().data();
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Data

struct PairedSequence {
    FrameSequence degraded, clean;
};

using Dataset = std::vector<PairedSequence>;

inline void validate_dataset(const Dataset& data, std::size_t crop) {
    if (data.empty()) throw DataError("training dataset is empty");
    for (std::size_t s = 0; s < data.size(); ++s) {
        const auto& seq = data[s];
        if (seq.degraded.empty()) throw DataError("sequence " + std::to_string(s) + " has no frames");
        if (seq.degraded.size() != seq.clean.size())
            throw DataError("sequence " + std::to_string(s) + ": " + std::to_string(seq.degraded.size()) +
                            " degraded frames vs " + std::to_string(seq.clean.size()) + " clean frames");
        const Shape& shape = seq.degraded.front().shape();
        if (shape.size() != 3 || shape[0] != 3) throw DataError("sequence " + std::to_string(s) + ": frames must be 3×H×W");
        for (std::size_t i = 0; i < seq.degraded.size(); ++i)
            if (seq.degraded[i].shape() != shape || seq.clean[i].shape() != shape)
                throw DataError("sequence " + std::to_string(s) + ": frame " + std::to_string(i) +
                                " differs in shape from frame 0");
        if (crop > shape[1] || crop > shape[2])
            throw ConfigError("crop " + std::to_string(crop) + " exceeds frame size " + to_string(shape));
    }
}

inline Tensor crop_region(const Tensor& x, std::size_t top, std::size_t left, std::size_t h, std::size_t w) {
    const std::size_t C = x.dim(0), W = x.dim(2);
    Tensor out({C, h, w});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t i = 0; i < w; ++i) out[(c * h + y) * w + i] = x[(c * x.dim(1) + top + y) * W + left + i];
    return out;
}

inline Tensor flip(const Tensor& x, bool horizontal, bool vertical) {
    if (!horizontal && !vertical) return x;
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    Tensor out(x.shape());
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t i = 0; i < W; ++i)
                out[(c * H + y) * W + i] = x[(c * H + (vertical ? H - 1 - y : y)) * W + (horizontal ? W - 1 - i : i)];
    return out;
}

struct Sample {
    FrameSequence inputs;  // K degraded frames
    Tensor target;         // clean reference frame
};

/// Draws one training sample: a sequence, a reference index (restricted to full temporal windows
/// when the sequence is long enough), an aligned random crop and optional flips shared by all
/// frames and the target.
template <class Rng>
Sample draw_sample(const Dataset& data, std::size_t K, std::size_t crop, bool flips, Rng& rng) {
    const auto& seq = data[std::uniform_int_distribution<std::size_t>(0, data.size() - 1)(rng)];
    const std::size_t n = seq.degraded.size(), half = K / 2;
    const std::size_t center = n >= K ? std::uniform_int_distribution<std::size_t>(half, n - 1 - half)(rng)
                                      : std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    const std::size_t H = seq.degraded.front().dim(1), W = seq.degraded.front().dim(2);
    const std::size_t ch = crop ? crop : H, cw = crop ? crop : W;
    const std::size_t top = std::uniform_int_distribution<std::size_t>(0, H - ch)(rng);
    const std::size_t left = std::uniform_int_distribution<std::size_t>(0, W - cw)(rng);
    bool hflip = false, vflip = false;
    if (flips) {
        std::bernoulli_distribution coin(0.5);
        hflip = coin(rng);
        vflip = coin(rng);
    }
    auto prepare = [&](const Tensor& t) { return flip(crop_region(t, top, left, ch, cw), hflip, vflip); };
    Sample s;
    for (const auto& f : temporal_window(seq.degraded, center, K)) s.inputs.push_back(prepare(f));
    s.target = prepare(seq.clean[center]);
    return s;
}

/// Per-iteration generator, so a resumed run draws the same samples as an uninterrupted one.
inline std::mt19937_64 iteration_rng(std::uint64_t seed, std::size_t iteration) {
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(iteration),
                      std::uint32_t(std::uint64_t(iteration) >> 32), 0x7472u};
    return std::mt19937_64(seq);
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainState {
    std::size_t iteration = 0;  // iterations completed
    AdamState adam;
    std::vector<double> losses;  // loss of each completed iteration, measured before its update
};

struct TrainHooks {
    std::function<void(std::size_t iteration, double loss)> on_iteration;
    std::function<void(const TrainState&)> on_checkpoint;
};

/// Runs iterations state.iteration .. cfg.iterations−1.
inline void train(Vtudc& model, const Dataset& data, const TrainConfig& cfg, TrainState& state,
                  const TrainHooks& hooks = {}) {
    cfg.validate();
    validate_dataset(data, cfg.crop);
    ParamStore& params = model.params();
    for (; state.iteration < cfg.iterations; ++state.iteration) {
        auto rng = iteration_rng(cfg.seed, state.iteration);
        params.zero_grad();
        double loss_value = 0.0;
        for (std::size_t a = 0; a < cfg.grad_accumulation; ++a) {
            Sample s = draw_sample(data, model.config().frames, cfg.crop, cfg.flip_augment, rng);
            Tape tape;
            TapeScope scope(tape);
            Var loss = charbonnier_loss(model.forward(s.inputs), s.target, cfg.charbonnier_eps);
            if (cfg.grad_accumulation > 1) loss = scale(loss, 1.0 / double(cfg.grad_accumulation));
            loss_value += loss.value().item();
            tape.backward(loss);
        }
        if (!std::isfinite(loss_value))
            throw NumericError("non-finite loss at iteration " + std::to_string(state.iteration));
        adam_step(params, state.adam, cfg, cfg.lr_at(state.iteration));
        state.losses.push_back(loss_value);
        if (hooks.on_iteration) hooks.on_iteration(state.iteration, loss_value);
        if (cfg.checkpoint_interval && (state.iteration + 1) % cfg.checkpoint_interval == 0 && hooks.on_checkpoint) {
            TrainState snapshot = state;
            ++snapshot.iteration;
            hooks.on_checkpoint(snapshot);
        }
    }
    params.zero_grad();
}

/// Loss of the model on one full-frame window, without recording.
inline double evaluate_loss(const Vtudc& model, const FrameSequence& inputs, const Tensor& target, double eps) {
    NoGradScope no_grad;
    return charbonnier_loss(model.forward(inputs), target, eps).value().item();
}

inline void write_loss_curve(const std::filesystem::path& path, const std::vector<double>& losses) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write " + path.string());
    f << "iteration,loss\n";
    for (std::size_t i = 0; i < losses.size(); ++i) f << i << ',' << KeyValues::format(losses[i]) << '\n';
}

inline std::vector<double> read_loss_curve(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read " + path.string());
    std::string line;
    std::getline(f, line);
    std::vector<double> out;
    while (std::getline(f, line)) {
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw DataError("malformed loss curve line '" + line + "'");
        out.push_back(std::stod(line.substr(comma + 1)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: <dir>/manifest.txt, <dir>/params/<path>.udct, <dir>/adam/{m,v}/<path>.udct

inline constexpr const char* kCheckpointFormat = "udcvr-checkpoint-1";

inline void save_checkpoint(const std::filesystem::path& dir, const Vtudc& model, const TrainConfig& cfg,
                            const TrainState& state) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "params");
    KeyValues manifest;
    manifest.set("format", kCheckpointFormat);
    manifest.set("iteration", std::uint64_t(state.iteration));
    manifest.set("loss", state.losses.empty() ? std::string("nan") : KeyValues::format(state.losses.back()));
    manifest.set("adam.step", state.adam.step);
    manifest.set("parameters", std::uint64_t(model.params().size()));
    KeyValues mk, tk;
    model.config().write(mk);
    cfg.write(tk);
    manifest.merge("model.", mk);
    manifest.merge("train.", tk);
    for (const auto& path : model.params().paths()) io::save_tensor(dir / "params" / (path + ".udct"), model.params().get(path).value());
    if (state.adam.step > 0) {
        fs::create_directories(dir / "adam" / "m");
        fs::create_directories(dir / "adam" / "v");
        for (const auto& [path, t] : state.adam.m) io::save_tensor(dir / "adam" / "m" / (path + ".udct"), t);
        for (const auto& [path, t] : state.adam.v) io::save_tensor(dir / "adam" / "v" / (path + ".udct"), t);
    }
    manifest.save(dir / "manifest.txt");
}

struct Checkpoint {
    std::unique_ptr<Vtudc> model;
    TrainConfig train;
    TrainState state;  // losses are not stored in the checkpoint
};

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_regular_file(dir / "manifest.txt")) throw DataError("no checkpoint manifest in " + dir.string());
    const auto manifest = KeyValues::load(dir / "manifest.txt");
    if (manifest.get_string("format", "") != kCheckpointFormat)
        throw DataError("unsupported checkpoint format in " + dir.string());
    Checkpoint ck;
    ck.model = std::make_unique<Vtudc>(ModelConfig::read(manifest.section("model.")));
    ck.train = TrainConfig::read(manifest.section("train."));
    ck.state.iteration = manifest.get_u64("iteration");
    ck.state.adam.step = manifest.get_u64("adam.step", 0);
    auto& params = ck.model->params();
    for (const auto& path : params.paths()) {
        const auto file = dir / "params" / (path + ".udct");
        if (!fs::exists(file)) throw DataError("checkpoint " + dir.string() + " is missing tensor '" + path + "'");
        params.assign(path, io::load_tensor(file));
        if (ck.state.adam.step > 0) {
            for (auto [sub, slot] : {std::pair{"m", &ck.state.adam.m}, std::pair{"v", &ck.state.adam.v}}) {
                const auto f = dir / "adam" / sub / (path + ".udct");
                if (!fs::exists(f)) throw DataError("checkpoint " + dir.string() + " is missing optimizer state for '" + path + "'");
                Tensor t = io::load_tensor(f);
                if (t.shape() != params.get(path).shape())
                    throw DataError("optimizer state for '" + path + "' has the wrong shape");
                slot->emplace(path, std::move(t));
            }
        }
    }
    return ck;
}

}  // namespace udcvr

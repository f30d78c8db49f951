// udcvr: degrade, train, restore, eval and gradcheck commands.

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <thread>

#include "udcvr/gradcheck_suite.hpp"
#include "udcvr/image_io.hpp"
#include "udcvr/metrics.hpp"
#include "udcvr/run_manifest.hpp"
#include "udcvr/training.hpp"

namespace fs = std::filesystem;
using namespace udcvr;

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kVerification = 3 };

struct VerificationFailure : Error {
    using Error::Error;
};

std::size_t worker_threads() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("UDCVR_THREADS")) {
        try {
            n = std::max<std::size_t>(1, std::stoul(env));
        } catch (const std::exception&) {
            throw ConfigError(std::string("UDCVR_THREADS must be a positive integer, got '") + env + "'");
        }
    }
    return n;
}

void record_flags(const CLI::App& sub, RunManifest& m) {
    for (const CLI::Option* opt : sub.get_options()) {
        const std::string name = opt->get_name();
        if (name == "--help" || name.empty()) continue;
        std::string value;
        if (opt->count()) {
            for (const auto& r : opt->results()) value += (value.empty() ? "" : ",") + r;
            if (opt->get_type_size() == 0 && value.empty()) value = "true";
        } else {
            value = opt->get_type_size() == 0 ? "false" : opt->get_default_str();
        }
        m.flags.emplace_back(name.substr(name.find_first_not_of('-')), value);
    }
}

// A directory holding degraded/ and clean/ is one sequence; otherwise each subdirectory is.
Dataset load_dataset(const fs::path& root) {
    if (!fs::is_directory(root)) throw DataError("training data directory " + root.string() + " does not exist");
    std::vector<fs::path> dirs;
    if (fs::is_directory(root / "degraded")) {
        dirs.push_back(root);
    } else {
        for (const auto& e : fs::directory_iterator(root))
            if (e.is_directory() && fs::is_directory(e.path() / "degraded")) dirs.push_back(e.path());
        std::sort(dirs.begin(), dirs.end());
    }
    if (dirs.empty()) throw DataError("no degraded/ + clean/ sequences under " + root.string());
    Dataset data;
    for (const auto& d : dirs) {
        if (!fs::is_directory(d / "clean")) throw DataError(d.string() + " has degraded/ but no clean/ frames");
        data.push_back({io::read_sequence(d / "degraded"), io::read_sequence(d / "clean")});
    }
    return data;
}

int cmd_degrade(const fs::path& in, const fs::path& out, const PsfSpec& spec, DegradationParams p) {
    p.psf = make_psf(spec);
    p.validate();
    const auto frames = io::read_sequence(in);
    io::write_sequence(out, degrade_sequence(frames, p));
    KeyValues kv = p.to_kv();
    kv.set("psf_kind", to_string(spec.kind));
    kv.save(out / "degradation.txt");
    std::cout << "degraded " << frames.size() << " frames -> " << out << '\n';
    return kOk;
}

int cmd_train(const fs::path& data_dir, const std::string& config_path, const fs::path& out, bool resume,
              const std::function<void(ModelConfig&, TrainConfig&)>& overrides) {
    KeyValues file;
    if (!config_path.empty()) file = KeyValues::load(config_path);
    ModelConfig mcfg = ModelConfig::read(file.section("model."));
    TrainConfig tcfg = TrainConfig::read(file);
    overrides(mcfg, tcfg);
    mcfg.validate();
    tcfg.validate();
    const Dataset data = load_dataset(data_dir);

    std::unique_ptr<Vtudc> model;
    TrainState state;
    if (resume && fs::exists(out / "manifest.txt")) {
        auto ck = load_checkpoint(out);
        model = std::move(ck.model);
        state = std::move(ck.state);
        if (fs::exists(out / "loss.csv")) state.losses = read_loss_curve(out / "loss.csv");
        state.losses.resize(std::min(state.losses.size(), state.iteration));
        std::cout << "resuming at iteration " << state.iteration << '\n';
    } else {
        model = std::make_unique<Vtudc>(mcfg, InitOptions{tcfg.seed, true});
    }
    fs::create_directories(out);
    auto persist = [&](const TrainState& s) {
        save_checkpoint(out, *model, tcfg, s);
        write_loss_curve(out / "loss.csv", s.losses);
    };
    TrainHooks hooks;
    hooks.on_iteration = [&](std::size_t i, double loss) {
        if (i % 50 == 0 || i + 1 == tcfg.iterations)
            std::cout << "iter " << std::setw(6) << i << "  loss " << std::setprecision(6) << loss << '\n';
    };
    hooks.on_checkpoint = persist;
    train(*model, data, tcfg, state, hooks);
    persist(state);
    std::cout << "checkpoint written to " << out << '\n';
    return kOk;
}

int cmd_restore(const fs::path& ckpt, const fs::path& in, const fs::path& out) {
    auto ck = load_checkpoint(ckpt);
    const Vtudc& model = *ck.model;
    const auto seq = io::read_sequence(in);
    FrameSequence restored(seq.size());
    const std::size_t workers = std::min(worker_threads(), seq.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto work = [&] {
        for (std::size_t i; (i = next++) < seq.size();) {
            try {
                restored[i] = model.restore(temporal_window(seq, i, model.config().frames));
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
    io::write_sequence(out, restored);
    std::cout << "restored " << restored.size() << " frames -> " << out << '\n';
    return kOk;
}

int cmd_eval(const fs::path& pred, const fs::path& gt, const fs::path& out) {
    const auto report = metrics::evaluate(io::read_sequence(pred), io::read_sequence(gt));
    std::cout << report.table();
    if (!out.empty()) {
        fs::create_directories(out);
        std::ofstream(out / "metrics.csv") << report.csv();
        std::ofstream(out / "metrics.txt") << report.table();
    }
    return kOk;
}

int cmd_gradcheck(const GradSuiteOptions& opt, const fs::path& out) {
    std::ostringstream report;
    report << std::left << std::setw(36) << "op" << std::setw(14) << "max_rel_err" << std::setw(9) << "entries"
           << "status\n";
    auto results = run_gradcheck_suite(opt, [&](const GradCheckResult& r) {
        std::ostringstream line;
        line << std::left << std::setw(36) << r.name << std::setw(14) << std::scientific << std::setprecision(3)
             << r.max_rel_error << std::setw(9) << r.entries_checked << (r.passed ? "ok" : "FAIL") << '\n';
        std::cout << line.str() << std::flush;
        report << line.str();
    });
    const bool ok = all_passed(results);
    report << (ok ? "all checks passed\n" : "gradient check FAILED\n");
    std::cout << (ok ? "all checks passed\n" : "gradient check FAILED\n");
    if (!out.empty()) {
        fs::create_directories(out);
        std::ofstream(out / "gradcheck.txt") << report.str();
    }
    if (!ok) throw VerificationFailure("gradient check failed");
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Under-display-camera video restoration toolkit"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    // degrade
    auto* degrade = app.add_subcommand("degrade", "Synthesize a UDC-degraded copy of a frame sequence");
    std::string d_in, d_out, d_psf = "toled";
    PsfSpec spec = PsfSpec::toled();
    DegradationParams dparams;
    dparams.gamma = 0.7;
    std::optional<std::size_t> psf_size;
    std::optional<double> psf_sigma, band_amplitude, haze_weight;
    std::optional<std::size_t> band_period;
    degrade->add_option("--in", d_in, "Directory of numbered PNG frames")->required()->check(CLI::ExistingDirectory);
    degrade->add_option("--out", d_out, "Output directory")->required();
    degrade->add_option("--psf", d_psf, "PSF family")->capture_default_str()->check(CLI::IsMember({"gaussian", "toled", "poled"}));
    degrade->add_option("--gamma", dparams.gamma, "Light attenuation in (0,1]")->capture_default_str();
    degrade->add_option("--lread", dparams.lambda_read, "Read-noise variance")->capture_default_str();
    degrade->add_option("--lshot", dparams.lambda_shot, "Shot-noise variance slope")->capture_default_str();
    degrade->add_option("--seed", dparams.seed, "Noise seed")->capture_default_str();
    degrade->add_option("--psf-size", psf_size, "Kernel side (odd)");
    degrade->add_option("--psf-sigma", psf_sigma, "Gaussian width");
    degrade->add_option("--band-period", band_period, "TOLED band period in pixels");
    degrade->add_option("--band-amplitude", band_amplitude, "TOLED band amplitude in [0,1]");
    degrade->add_option("--haze-weight", haze_weight, "POLED haze weight in [0,1]");

    // train
    auto* trainc = app.add_subcommand("train", "Train a restoration model on paired sequences");
    std::string t_data, t_config, t_out, t_fusion, t_qkv, t_branches;
    bool t_resume = false;
    std::optional<std::size_t> t_iterations, t_crop;
    std::optional<std::uint64_t> t_seed;
    trainc->add_option("--data", t_data, "Directory with degraded/ and clean/ (or subdirectories of such)")->required();
    trainc->add_option("--config", t_config, "key=value training config (model.* keys set the architecture)");
    trainc->add_option("--out", t_out, "Checkpoint directory")->required();
    trainc->add_flag("--resume", t_resume, "Continue from the checkpoint in --out");
    trainc->add_option("--iterations", t_iterations, "Override the iteration count");
    trainc->add_option("--crop", t_crop, "Override the crop size");
    trainc->add_option("--seed", t_seed, "Override the seed");
    trainc->add_option("--fusion", t_fusion, "Fusion module")->check(CLI::IsMember({"stfm", "concat", "add"}));
    trainc->add_option("--temporal-qkv", t_qkv, "Temporal query/key selection")
        ->check(CLI::IsMember({"neighbors", "with-ref", "neighbors-only"}));
    trainc->add_option("--branches", t_branches, "Active branches")->check(CLI::IsMember({"both", "spatial", "temporal"}));

    // restore
    auto* restore = app.add_subcommand("restore", "Restore every frame of a degraded sequence");
    std::string r_ckpt, r_in, r_out;
    restore->add_option("--ckpt", r_ckpt, "Checkpoint directory")->required();
    restore->add_option("--in", r_in, "Degraded frames")->required();
    restore->add_option("--out", r_out, "Output directory")->required();

    // eval
    auto* evalc = app.add_subcommand("eval", "PSNR/SSIM of predicted frames against ground truth");
    std::string e_pred, e_gt, e_out;
    evalc->add_option("--pred", e_pred, "Predicted frames")->required();
    evalc->add_option("--gt", e_gt, "Ground-truth frames")->required();
    evalc->add_option("--out", e_out, "Directory for metrics.csv and metrics.txt");

    // gradcheck
    auto* gradc = app.add_subcommand("gradcheck", "Finite-difference verification of all differentiable ops");
    GradSuiteOptions g;
    std::string g_out;
    gradc->add_option("--seed", g.seed, "Seed for probe inputs and the tiny model")->capture_default_str();
    gradc->add_option("--size", g.size, "Spatial side of per-op probes (>= 4)")->capture_default_str();
    gradc->add_option("--corrupt-backward", g.corrupt, "Break the backward rule of this op (harness self-test)");
    gradc->add_option("--out", g_out, "Directory for gradcheck.txt");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    RunManifest manifest;
    const auto start = std::chrono::steady_clock::now();
    CLI::App* active = app.get_subcommands().front();
    manifest.command = active->get_name();
    record_flags(*active, manifest);
    fs::path manifest_dir;
    try {
        int code = kOk;
        if (active == degrade) {
            spec = d_psf == "gaussian" ? PsfSpec{PsfKind::gaussian, 5, 1.0} : d_psf == "poled" ? PsfSpec::poled() : PsfSpec::toled();
            if (psf_size) spec.size = *psf_size;
            if (psf_sigma) spec.sigma = *psf_sigma;
            if (band_period) spec.band_period = *band_period;
            if (band_amplitude) spec.band_amplitude = *band_amplitude;
            if (haze_weight) spec.haze_weight = *haze_weight;
            manifest.seed = dparams.seed;
            manifest.inputs = {d_in};
            manifest.outputs = {d_out};
            manifest_dir = d_out;
            code = cmd_degrade(d_in, d_out, spec, dparams);
        } else if (active == trainc) {
            manifest.inputs = {t_data};
            if (!t_config.empty()) manifest.inputs.push_back(t_config);
            manifest.outputs = {t_out};
            manifest_dir = t_out;
            code = cmd_train(t_data, t_config, t_out, t_resume, [&](ModelConfig& m, TrainConfig& t) {
                if (t_iterations) t.iterations = *t_iterations;
                if (t_crop) t.crop = *t_crop;
                if (t_seed) t.seed = *t_seed;
                if (!t_fusion.empty()) m.fusion = parse_fusion_mode(t_fusion);
                if (!t_qkv.empty()) m.temporal_qkv = parse_temporal_qkv(t_qkv);
                if (!t_branches.empty()) m.branches = parse_branches(t_branches);
                manifest.seed = t.seed;
            });
        } else if (active == restore) {
            manifest.inputs = {r_ckpt, r_in};
            manifest.outputs = {r_out};
            manifest_dir = r_out;
            code = cmd_restore(r_ckpt, r_in, r_out);
        } else if (active == evalc) {
            manifest.inputs = {e_pred, e_gt};
            if (!e_out.empty()) manifest.outputs = {e_out};
            manifest_dir = e_out;
            code = cmd_eval(e_pred, e_gt, e_out);
        } else if (active == gradc) {
            manifest.seed = g.seed;
            if (!g_out.empty()) manifest.outputs = {g_out};
            manifest_dir = g_out;
            code = cmd_gradcheck(g, g_out);
        }
        manifest.duration_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (!manifest_dir.empty()) manifest.save(manifest_dir);
        return code;
    } catch (const VerificationFailure& e) {
        manifest.duration_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (!manifest_dir.empty()) manifest.save(manifest_dir);
        std::cerr << "error: " << e.what() << '\n';
        return kVerification;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kData;
    }
}

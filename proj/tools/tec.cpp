// SPDX-License-Identifier: Apache-2.0
//
// tec: command-line front end.
//
//   tec gen-data      --out DIR [--n-images N] [--seed S]
//   tec pretrain-base --out base.ckpt [--epochs E] [--seed S]
//   tec pretrain      --base base.ckpt --out RUN [--tau T] [--k K] [--strip] [--chain N]
//   tec chain         --base base.ckpt --out RUN --rounds N
//   tec export        --state RUN/state.ckpt --out encoder.ckpt
//   tec diag sim      --base base.ckpt [--n 256] [--out sim.csv]
//   tec diag adapters --run RUN [--n 64] [--out adapters.csv]
//   tec gradcheck     [--seed S]
//
// Any option can also come from a flat `key = value` file given with
// --config FILE; command-line flags take precedence.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tec/tec.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// FNV-1a over the resolved config gives a stable run id.
std::string run_id(const json& config) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : config.dump()) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

class Manifest {
public:
    Manifest(fs::path path, std::string command, json config, json inputs, json outputs) : path_(std::move(path)) {
        doc_ = {{"command", std::move(command)},
                {"run_id", run_id(config)},
                {"config", std::move(config)},
                {"inputs", std::move(inputs)},
                {"outputs", std::move(outputs)},
                {"started_at", utc_now()},
                {"finished_at", nullptr},
                {"status", "running"}};
        write();
    }

    void finish(const std::string& status) {
        doc_["finished_at"] = utc_now();
        doc_["status"] = status;
        write();
    }

private:
    void write() const { tec::detail::write_file(path_, doc_.dump(2) + "\n"); }
    fs::path path_;
    json doc_;
};

class MetricsCsv {
public:
    MetricsCsv(const fs::path& path, const std::string& header) {
        if (path.has_parent_path()) fs::create_directories(path.parent_path());
        out_.open(path, std::ios::trunc);
        if (!out_) throw tec::IngestionError("cannot write " + path.string());
        out_.precision(10);
        out_ << header << '\n';
        out_.flush();
    }
    template <typename... Ts>
    void row(const Ts&... xs) {
        std::size_t i = 0;
        ((out_ << (i++ ? "," : "") << xs), ...);
        out_ << '\n';
        out_.flush();
    }

private:
    std::ofstream out_;
};

// ------------------------------------------------------------------ options

struct DataOpts {
    std::string dir;
    std::size_t n_images = 2048;
    std::uint64_t seed = 0;

    void add(CLI::App* app) {
        app->add_option("--data", dir, "Directory of .teci images (default: synthetic corpus)");
        app->add_option("--n-images", n_images, "Synthetic corpus size")->check(CLI::PositiveNumber);
        app->add_option("--data-seed", seed, "Synthetic corpus seed");
    }

    std::vector<tec::Tensor> load(const tec::ViTConfig& vit) const {
        tec::Corpus corpus;
        if (!dir.empty()) {
            corpus = tec::load_dir(dir);
        } else {
            tec::CorpusConfig cc;
            cc.n_images = n_images;
            cc.image_size = vit.image_size;
            cc.channels = vit.channels;
            cc.seed = seed;
            corpus = tec::gen_synthetic(cc);
        }
        for (const auto& r : corpus)
            if (r.pixels.shape() != tec::Shape{vit.channels, vit.image_size, vit.image_size})
                throw tec::ConfigError("image " + r.id + " has shape " + tec::shape_str(r.pixels.shape()) +
                                       ", model expects " + std::to_string(vit.channels) + "x" +
                                       std::to_string(vit.image_size) + "x" + std::to_string(vit.image_size));
        return tec::corpus_pixels(corpus);
    }

    json to_json() const { return {{"data", dir}, {"n_images", n_images}, {"data_seed", seed}}; }
};

void add_train_options(CLI::App* app, tec::TrainConfig& t) {
    app->add_option("--epochs", t.total_epochs, "Training epochs");
    app->add_option("--warmup-epochs", t.warmup_epochs, "Linear warmup epochs");
    app->add_option("--max-steps", t.max_steps, "Stop after this many steps (0: full schedule)");
    app->add_option("--batch-size", t.batch_size, "Images per step");
    app->add_option("--lr", t.base_lr, "Base learning rate (scaled by batch/256)");
    app->add_option("--min-lr", t.min_lr, "Final learning rate");
    app->add_option("--weight-decay", t.weight_decay, "AdamW weight decay");
    app->add_option("--beta1", t.beta1);
    app->add_option("--beta2", t.beta2);
    app->add_option("--mask-ratio", t.mask_ratio, "Fraction of patches masked");
    app->add_option("--seed", t.seed, "Run seed");
    app->add_flag("--augment,!--no-augment", t.augment, "Random crop-and-resize augmentation");
}

void add_vit_options(CLI::App* app, tec::ViTConfig& v) {
    app->add_option("--image-size", v.image_size);
    app->add_option("--patch-size", v.patch_size);
    app->add_option("--channels", v.channels);
    app->add_option("--depth", v.depth, "Encoder blocks");
    app->add_option("--heads", v.heads, "Attention heads");
    app->add_option("--dim", v.embed_dim, "Embedding width");
}

void log_step(const char* tag, std::size_t step, std::size_t total, double loss, double lr) {
    if (step % 10 == 0 || step + 1 == total)
        std::fprintf(stderr, "[%s] step %zu/%zu loss %.5f lr %.3e\n", tag, step, total, loss, lr);
}

// ----------------------------------------------------------------- commands

struct GenDataCmd {
    std::string out;
    tec::CorpusConfig cfg;

    void add(CLI::App& root) {
        auto* app = root.add_subcommand("gen-data", "Write the synthetic corpus as .teci files");
        app->add_option("--out", out, "Output directory")->required();
        app->add_option("--n-images", cfg.n_images)->check(CLI::PositiveNumber);
        app->add_option("--image-size", cfg.image_size)->check(CLI::PositiveNumber);
        app->add_option("--channels", cfg.channels)->check(CLI::PositiveNumber);
        app->add_option("--classes", cfg.n_classes)->check(CLI::PositiveNumber);
        app->add_option("--seed", cfg.seed);
        app->callback([this] { run(); });
    }

    void run() const {
        tec::write_corpus(out, tec::gen_synthetic(cfg));
        std::fprintf(stderr, "wrote %zu images to %s\n", cfg.n_images, out.c_str());
    }
};

struct PretrainBaseCmd {
    std::string out;
    tec::MimConfig mim;
    tec::TrainConfig train;
    DataOpts data;

    PretrainBaseCmd() { train.base_lr = 3e-3; }

    void add(CLI::App& root) {
        auto* app = root.add_subcommand("pretrain-base", "Train a toy base encoder by masked pixel reconstruction");
        app->add_option("--out", out, "Base checkpoint path")->required();
        add_vit_options(app, mim.encoder);
        app->add_option("--decoder-dim", mim.decoder_dim);
        add_train_options(app, train);
        data.add(app);
        app->callback([this] { run(); });
    }

    void run() {
        mim.encoder.validate();
        train.validate();
        const fs::path ckpt(out);
        const fs::path stem = ckpt.parent_path() / ckpt.stem();
        const fs::path metrics = stem.string() + ".metrics.csv";
        json config = {{"vit", mim.encoder}, {"decoder_dim", mim.decoder_dim}, {"train", train}, {"data", data.to_json()}};
        Manifest manifest(stem.string() + ".manifest.json", "pretrain-base", config, data.to_json(),
                          {{"checkpoint", ckpt.string()}, {"metrics", metrics.string()}});
        const auto images = data.load(mim.encoder);
        MetricsCsv csv(metrics, "step,loss,lr");
        const std::size_t total = train.total_steps(images.size());
        tec::ViT base = tec::pretrain_base_mim(mim, train, images, [&](std::size_t s, const tec::LossReport& r, double lr) {
            csv.row(s, r.total, lr);
            log_step("pretrain-base", s, total, r.total, lr);
        });
        tec::encoder_checkpoint(base, total, "seed=" + std::to_string(train.seed)).save(ckpt);
        manifest.finish("ok");
    }
};

struct TecCmd {
    std::string name;
    std::string base;
    std::string out;
    tec::TecConfig tec_cfg;
    tec::TrainConfig train;
    DataOpts data;
    long k = -1;
    std::size_t rounds = 1;
    bool strip = false;

    TecCmd(std::string n) : name(std::move(n)) { train.base_lr = 1.5e-3; }

    void add(CLI::App& root) {
        const bool chain = name == "chain";
        auto* app = root.add_subcommand(name, chain ? "Run several TEC rounds, each using the previous encoder as base"
                                                    : "TEC pretraining of a new encoder from a frozen base");
        app->add_option("--base", base, "Frozen base encoder checkpoint")->required();
        app->add_option("--out", out, "Run directory")->required();
        app->add_option("--tau", tec_cfg.targets.tau, "Attention target temperature");
        app->add_option("--k", k, "Selected patches (default min(15, L-1))");
        app->add_option("--lambda-att", train.lambda_att, "Attention loss weight");
        app->add_option("--group-size", tec_cfg.group_size, "Encoder blocks per adapter group");
        app->add_option("--decoder-dim", tec_cfg.decoder_dim);
        app->add_option("--decoder-heads", tec_cfg.decoder_heads);
        app->add_flag("--strip", strip, "Write only the stripped encoder");
        if (chain)
            app->add_option("--rounds", rounds, "Number of rounds")->check(CLI::PositiveNumber);
        else
            app->add_option("--chain", rounds, "Number of chained rounds")->check(CLI::PositiveNumber);
        add_train_options(app, train);
        data.add(app);
        app->callback([this] { run(); });
    }

    void run() {
        tec::ViT prev = tec::load_encoder(tec::Checkpoint::load(base));
        const std::size_t l = prev.config.num_patches();
        tec_cfg.encoder = prev.config;
        tec_cfg.targets.k = k < 0 ? std::min<std::size_t>(15, l - 1) : static_cast<std::size_t>(k);
        tec_cfg.validate();
        train.validate();

        const fs::path dir(out);
        json config = {{"tec", tec_cfg}, {"train", train}, {"rounds", rounds}, {"strip", strip}, {"data", data.to_json()}};
        json outputs = json::array();
        for (std::size_t r = 1; r <= rounds; ++r) outputs.push_back(round_dir(dir, r).string());
        Manifest manifest(dir / "manifest.json", name, config, {{"base", base}, {"data", data.to_json()}}, outputs);
        const auto images = data.load(tec_cfg.encoder);

        for (std::size_t r = 1; r <= rounds; ++r) {
            const fs::path rd = round_dir(dir, r);
            MetricsCsv csv(rd / "metrics.csv", "step,l_fea,l_att,total,lr");
            tec::TrainConfig round_cfg = train;
            const std::size_t total = round_cfg.total_steps(images.size());
            const std::string tag = "tec round " + std::to_string(r);
            tec::TecModel state;
            tec::ViT stripped = tec::chain_round(
                prev, tec_cfg, round_cfg, images, r,
                [&](std::size_t s, const tec::LossReport& rep, double lr) {
                    csv.row(s, rep.l_fea, rep.l_att, rep.total, lr);
                    log_step(tag.c_str(), s, total, rep.total, lr);
                },
                &state);
            const std::string rng_state = "seed=" + std::to_string(train.seed);
            tec::encoder_checkpoint(stripped, total, rng_state).save(rd / "encoder.ckpt");
            if (!strip) tec::tec_state_checkpoint(state, tec_cfg, round_cfg, total, rng_state).save(rd / "state.ckpt");
            prev = std::move(stripped);
        }
        manifest.finish("ok");
    }

    // A single round writes straight into the run directory.
    fs::path round_dir(const fs::path& dir, std::size_t r) const {
        return rounds == 1 ? dir : dir / ("round" + std::to_string(r));
    }
};

struct ExportCmd {
    std::string state;
    std::string out;

    void add(CLI::App& root) {
        auto* app = root.add_subcommand("export", "Strip adapters and decoder from a TEC state checkpoint");
        app->add_option("--state", state, "TEC state checkpoint")->required();
        app->add_option("--out", out, "Encoder checkpoint to write")->required();
        app->callback([this] { run(); });
    }

    void run() const {
        const auto ck = tec::Checkpoint::load(state);
        tec::encoder_checkpoint(tec::strip_adapters(tec::load_tec_state(ck)), ck.step, ck.rng_state).save(out);
    }
};

std::ostream& open_out(const std::string& path, std::ofstream& file) {
    if (path.empty() || path == "-") return std::cout;
    if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
    file.open(path, std::ios::trunc);
    if (!file) throw tec::IngestionError("cannot write " + path);
    return file;
}

struct DiagSimCmd {
    std::string base;
    std::string out;
    std::size_t n = 256;
    DataOpts data;

    void add(CLI::App* diag) {
        auto* app = diag->add_subcommand("sim", "Patch similarity histograms (raw, channel-norm, patch-norm)");
        app->add_option("--base", base, "Encoder checkpoint")->required();
        app->add_option("--n", n, "Images to analyse")->check(CLI::PositiveNumber);
        app->add_option("--out", out, "CSV path (default stdout)");
        data.add(app);
        app->callback([this] { run(); });
    }

    void run() {
        const tec::ViT enc = tec::load_encoder(tec::Checkpoint::load(base));
        data.n_images = std::max(data.n_images, n);
        auto images = data.load(enc.config);
        images.resize(std::min(n, images.size()));
        const auto rep = tec::similarity_report(enc, images);
        std::ofstream file;
        std::ostream& os = open_out(out, file);
        os << "mode,bin_left,bin_right,count\n";
        const std::pair<const char*, const tec::CosineStats*> modes[] = {
            {"raw", &rep.raw}, {"channel_norm", &rep.channel}, {"patch_norm", &rep.patch}};
        for (const auto& [mode, st] : modes)
            for (std::size_t b = 0; b < tec::CosineStats::kBins; ++b)
                os << mode << ',' << tec::CosineStats::bin_left(b) << ',' << tec::CosineStats::bin_right(b) << ','
                   << st->histogram[b] << '\n';
        for (const auto& [mode, st] : modes) std::fprintf(stderr, "%s mean %.6f\n", mode, st->mean);
    }
};

struct DiagAdaptersCmd {
    std::string run_dir;
    std::string out;
    std::size_t n = 64;
    DataOpts data;

    void add(CLI::App* diag) {
        auto* app = diag->add_subcommand("adapters", "Average contribution of each encoder adapter group");
        app->add_option("--run", run_dir, "Run directory holding state.ckpt")->required();
        app->add_option("--n", n, "Images to average over")->check(CLI::PositiveNumber);
        app->add_option("--out", out, "CSV path (default stdout)");
        data.add(app);
        app->callback([this] { run(); });
    }

    void run() {
        const fs::path state = fs::path(run_dir) / "state.ckpt";
        if (!fs::exists(state)) throw tec::IngestionError(state.string() + " not found (was the run stripped?)");
        const tec::TecModel model = tec::load_tec_state(tec::Checkpoint::load(state));
        data.n_images = std::max(data.n_images, n);
        auto images = data.load(model.encoder.config);
        images.resize(std::min(n, images.size()));
        const auto prof = tec::adapter_profile(model, images);
        std::ofstream file;
        std::ostream& os = open_out(out, file);
        os << "group,proportion\n";
        for (std::size_t g = 0; g < prof.proportions.size(); ++g) os << g << ',' << prof.proportions[g] << '\n';
    }
};

struct GradcheckCmd {
    std::uint64_t seed = 0;
    std::size_t coords = 64;
    int status = 0;

    void add(CLI::App& root) {
        auto* app = root.add_subcommand("gradcheck", "Finite-difference check of the full TEC loss gradient");
        app->add_option("--seed", seed);
        app->add_option("--coords", coords, "Sampled coordinates")->check(CLI::PositiveNumber);
        app->callback([this] { run(); });
    }

    void run() {
        const auto r = tec::gradcheck_tec_loss(seed, coords);
        std::printf("max_rel_error %.6e over %zu coordinates\n", r.max_rel_error, r.coordinates);
        status = r.max_rel_error < 1e-4 ? 0 : kExitNumeric;
    }
};

// Reads `key = value` lines (with # comments) into `--key=value` tokens.
std::vector<std::string> config_tokens(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw tec::ConfigError("cannot read config file " + path);
    std::vector<std::string> out;
    std::string line;
    std::size_t lineno = 0;
    auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw tec::ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        std::ranges::replace(key, '_', '-');
        out.push_back("--" + key + "=" + trim(line.substr(eq + 1)));
    }
    return out;
}

// Splices config-file tokens right after the subcommand path so that
// explicit flags, which come later, win.
std::vector<std::string> expand_config(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    std::optional<std::string> config;
    std::vector<std::string> rest;
    for (std::size_t i = 0; i < args.size(); ++i) {
        if (args[i] == "--config") {
            if (i + 1 >= args.size()) throw tec::ConfigError("--config needs a file argument");
            config = args[++i];
        } else if (args[i].starts_with("--config=")) {
            config = args[i].substr(9);
        } else {
            rest.push_back(args[i]);
        }
    }
    if (!config) return rest;
    std::size_t pos = 1;
    while (pos < rest.size() && !rest[pos].starts_with("-") && pos <= 2) ++pos;
    auto tokens = config_tokens(*config);
    rest.insert(rest.begin() + static_cast<std::ptrdiff_t>(pos), tokens.begin(), tokens.end());
    return rest;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Target-enhanced masked pretraining toolkit"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    app.failure_message(CLI::FailureMessage::help);

    GenDataCmd gen;
    PretrainBaseCmd pretrain_base;
    TecCmd pretrain("pretrain"), chain("chain");
    ExportCmd export_cmd;
    DiagSimCmd diag_sim;
    DiagAdaptersCmd diag_adapters;
    GradcheckCmd gradcheck;

    gen.add(app);
    pretrain_base.add(app);
    pretrain.add(app);
    chain.add(app);
    export_cmd.add(app);
    auto* diag = app.add_subcommand("diag", "Diagnostics");
    diag->require_subcommand(1);
    diag_sim.add(diag);
    diag_adapters.add(diag);
    gradcheck.add(app);

    try {
        const auto args = expand_config(argc, argv);
        std::vector<const char*> cargs;
        for (const auto& a : args) cargs.push_back(a.c_str());
        app.parse(static_cast<int>(cargs.size()), cargs.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    } catch (const tec::NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return kExitNumeric;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const tec::IngestionError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 1;
    }
    return gradcheck.status;
}

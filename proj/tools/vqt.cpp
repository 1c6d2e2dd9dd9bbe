// Command-line front end: dataset generation, training, scoring, evaluation,
// and benchmarking. Every command is deterministic given --seed; exit codes
// are 0 success, 1 usage, 2 data/format error, 3 numerical failure.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "vqt/bench.hpp"
#include "vqt/data.hpp"
#include "vqt/metrics.hpp"
#include "vqt/model.hpp"

namespace fs = std::filesystem;
using vqt::ConfigError;
using vqt::DataError;
using vqt::UsageError;

namespace {

// ---------------------------------------------------------------------------
// Option machinery: schema-validated key=value configuration with precedence
// command line > config file > defaults.

enum class OptKind { string_v, int_v, double_v, uint64_v, flag_v };

struct OptionSpec {
    std::string name;
    OptKind kind;
    std::string default_value;
    std::string help;
};

struct Options {
    std::map<std::string, std::string> values;
    std::vector<std::string> positional;

    const std::string& str(const std::string& key) const { return values.at(key); }
    long long integer(const std::string& key) const {
        try {
            return std::stoll(values.at(key));
        } catch (const std::exception&) {
            throw UsageError("option --" + key + " expects an integer, got '" + values.at(key) + "'");
        }
    }
    double real(const std::string& key) const {
        try {
            return std::stod(values.at(key));
        } catch (const std::exception&) {
            throw UsageError("option --" + key + " expects a number, got '" + values.at(key) + "'");
        }
    }
    uint64_t u64(const std::string& key) const {
        try {
            return std::stoull(values.at(key));
        } catch (const std::exception&) {
            throw UsageError("option --" + key + " expects an unsigned integer, got '" +
                             values.at(key) + "'");
        }
    }
    bool flag(const std::string& key) const { return values.at(key) == "1"; }
};

const std::vector<OptionSpec> kGlobalSpecs = {
    {"seed", OptKind::uint64_v, "0", "random seed controlling every stochastic choice"},
    {"config", OptKind::string_v, "", "key = value configuration file"},
    {"preset", OptKind::string_v, "", "model preset (tiny|default)"},
};

std::map<std::string, std::string> parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open config file '" + path + "'");
    std::map<std::string, std::string> kv;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config '" + path + "' line " + std::to_string(lineno) +
                              ": expected key = value");
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t");
            const auto e = s.find_last_not_of(" \t");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError("config '" + path + "' line " + std::to_string(lineno) + ": empty key");
        kv[key] = value;
    }
    return kv;
}

Options parse_options(const std::vector<std::string>& args, const std::vector<OptionSpec>& specs,
                      bool allow_positional) {
    std::map<std::string, const OptionSpec*> schema;
    for (const auto& s : kGlobalSpecs) schema[s.name] = &s;
    for (const auto& s : specs) schema[s.name] = &s;

    std::map<std::string, std::string> from_cli;
    Options out;
    for (size_t i = 0; i < args.size(); ++i) {
        const std::string& a = args[i];
        if (a.rfind("--", 0) == 0) {
            const std::string name = a.substr(2);
            auto it = schema.find(name);
            if (it == schema.end()) throw UsageError("unknown option --" + name);
            if (it->second->kind == OptKind::flag_v) {
                from_cli[name] = "1";
            } else {
                if (i + 1 >= args.size()) throw UsageError("option --" + name + " needs a value");
                from_cli[name] = args[++i];
            }
        } else {
            if (!allow_positional) throw UsageError("unexpected argument '" + a + "'");
            out.positional.push_back(a);
        }
    }

    std::map<std::string, std::string> from_file;
    auto cfg_it = from_cli.find("config");
    if (cfg_it != from_cli.end() && !cfg_it->second.empty()) {
        from_file = parse_config_file(cfg_it->second);
        for (const auto& [key, value] : from_file) {
            (void)value;
            if (!schema.count(key))
                throw ConfigError("config file: unknown key '" + key + "' for this command");
        }
    }

    for (const auto& [name, spec] : schema) {
        if (from_cli.count(name))
            out.values[name] = from_cli[name];
        else if (from_file.count(name))
            out.values[name] = from_file[name];
        else
            out.values[name] = spec->default_value;
    }
    return out;
}

void echo_config(const Options& opt, const std::string& command) {
    std::fprintf(stderr, "# command = %s\n", command.c_str());
    for (const auto& [key, value] : opt.values)
        std::fprintf(stderr, "# %s = %s\n", key.c_str(), value.c_str());
}

size_t worker_threads() {
    size_t hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    if (const char* env = std::getenv("VQT_THREADS")) {
        try {
            const size_t cap = std::stoul(env);
            if (cap >= 1) hw = std::min(hw, cap);
        } catch (const std::exception&) {
            throw UsageError(std::string("VQT_THREADS must be a positive integer, got '") + env + "'");
        }
    }
    return hw;
}

void usage(std::FILE* to) {
    std::fprintf(to, "usage: vqt <command> [options]\n\n");
    std::fprintf(to, "commands:\n");
    std::fprintf(to, "  gen    --count N --size tiny|default --out DIR [--force]\n");
    std::fprintf(to, "  train  --manifest FILE --out CKPT [--preset tiny|default] [--epochs N]\n");
    std::fprintf(to, "         [--batch N] [--lr X] [--weight-decay X] [--decay-every N]\n");
    std::fprintf(to, "         [--decay-factor X] [--temporal mptn|dense] [--mptn-mode scatter|literal]\n");
    std::fprintf(to, "         [--log FILE]\n");
    std::fprintf(to, "  score  --checkpoint CKPT [--dump-attention DIR] CLIP [CLIP...]\n");
    std::fprintf(to, "  eval   --checkpoint CKPT --manifest FILE [--split train|test] [--report FILE]\n");
    std::fprintf(to, "  bench  --flops --T N [--N N] [--d N] | --scaling --T LIST [--reps N] [--csv FILE]\n");
    std::fprintf(to, "\nglobal options: --seed N, --config FILE, --preset NAME\n");
    std::fprintf(to, "environment: VQT_THREADS caps worker parallelism\n");
}

// ---------------------------------------------------------------------------

int cmd_gen(const std::vector<std::string>& args) {
    const std::vector<OptionSpec> specs = {
        {"count", OptKind::int_v, "0", "number of clips"},
        {"size", OptKind::string_v, "tiny", "clip geometry (tiny|default)"},
        {"out", OptKind::string_v, "dataset", "output directory"},
        {"force", OptKind::flag_v, "0", "overwrite an existing output directory"},
    };
    const Options opt = parse_options(args, specs, false);
    echo_config(opt, "gen");
    const long long count = opt.integer("count");
    if (count <= 0) throw UsageError("gen: --count must be positive");
    size_t t, h, w;
    if (opt.str("size") == "tiny") {
        t = 8;
        h = w = 32;
    } else if (opt.str("size") == "default") {
        t = 96;
        h = w = 224;
    } else {
        throw UsageError("gen: --size must be tiny or default");
    }
    const std::string out = opt.str("out");
    if (fs::exists(out) && !fs::is_empty(out) && !opt.flag("force"))
        throw DataError("gen: output directory '" + out + "' exists and is not empty (use --force)");

    const auto ds = vqt::generate_synthetic_dataset(size_t(count), t, h, w, opt.u64("seed"), out,
                                                    worker_threads());
    std::printf("manifest = %s\n", ds.manifest_path.c_str());
    // label histogram over [1, 5] in 8 half-unit bins
    std::vector<size_t> bins(8, 0);
    for (const auto& e : ds.manifest.entries) {
        const int b = std::min(7, std::max(0, int((e.label - 1.0) / 0.5)));
        bins[size_t(b)]++;
    }
    for (size_t b = 0; b < 8; ++b)
        std::printf("labels [%.1f, %.1f%s = %zu\n", 1.0 + 0.5 * double(b), 1.5 + 0.5 * double(b),
                    b == 7 ? "]" : ")", bins[b]);
    return 0;
}

vqt::ModelConfig config_from_options(const Options& opt) {
    vqt::ModelConfig cfg =
        vqt::ModelConfig::preset(opt.str("preset").empty() ? "tiny" : opt.str("preset"));
    cfg.temporal = vqt::temporal_mode_from_string(opt.str("temporal"));
    cfg.mptn_mode = vqt::mptn_mode_from_string(opt.str("mptn-mode"));
    return cfg;
}

int cmd_train(const std::vector<std::string>& args) {
    const std::vector<OptionSpec> specs = {
        {"manifest", OptKind::string_v, "", "dataset manifest"},
        {"out", OptKind::string_v, "model.vqtw", "checkpoint path"},
        {"log", OptKind::string_v, "", "epoch log path (default: <out>.log)"},
        {"temporal", OptKind::string_v, "mptn", "temporal stage (mptn|dense)"},
        {"mptn-mode", OptKind::string_v, "scatter", "pathway aggregation (scatter|literal)"},
        {"epochs", OptKind::int_v, "90", "training epochs"},
        {"batch", OptKind::int_v, "4", "mini-batch size"},
        {"lr", OptKind::double_v, "1e-5", "AdamW learning rate"},
        {"beta1", OptKind::double_v, "0.9", "AdamW beta1"},
        {"beta2", OptKind::double_v, "0.999", "AdamW beta2"},
        {"weight-decay", OptKind::double_v, "0.01", "decoupled weight decay"},
        {"decay-every", OptKind::int_v, "30", "epochs between learning-rate decays"},
        {"decay-factor", OptKind::double_v, "0.1", "learning-rate decay factor"},
        {"head-lr-scale", OptKind::double_v, "1.0", "learning-rate multiplier for the head"},
        {"strict-selection", OptKind::flag_v, "0",
         "fidelity mode: threshold scan only, unfilled keyframe slots stay zero"},
    };
    const Options opt = parse_options(args, specs, false);
    echo_config(opt, "train");
    if (opt.str("manifest").empty()) throw UsageError("train: --manifest is required");
    if (opt.integer("epochs") <= 0) throw UsageError("train: --epochs must be positive");
    if (opt.integer("batch") <= 0) throw UsageError("train: --batch must be positive");

    const vqt::Manifest manifest = vqt::load_manifest(opt.str("manifest"));
    const std::string data_dir = fs::path(opt.str("manifest")).parent_path().string();

    vqt::ModelConfig cfg = config_from_options(opt);
    cfg.strict_selection = opt.flag("strict-selection");
    auto model = vqt::build_model<float>(cfg, opt.u64("seed"));

    vqt::TrainConfig tc;
    tc.epochs = size_t(opt.integer("epochs"));
    tc.batch = size_t(opt.integer("batch"));
    tc.lr = opt.real("lr");
    tc.beta1 = opt.real("beta1");
    tc.beta2 = opt.real("beta2");
    tc.weight_decay = opt.real("weight-decay");
    tc.decay_every = size_t(opt.integer("decay-every"));
    tc.decay_factor = opt.real("decay-factor");
    tc.head_lr_scale = opt.real("head-lr-scale");
    tc.seed = opt.u64("seed");
    tc.threads = worker_threads();

    const auto result = vqt::train(model, manifest, data_dir.empty() ? "." : data_dir, tc);

    const std::string log_path = opt.str("log").empty() ? opt.str("out") + ".log" : opt.str("log");
    {
        std::ofstream log(log_path, std::ios::trunc);
        if (!log) throw DataError("train: cannot write log '" + log_path + "'");
        for (const auto& e : result.log) log << e.line() << "\n";
    }
    vqt::save_checkpoint(model.params, cfg, opt.str("out"));
    for (const auto& e : result.log) std::printf("%s\n", e.line().c_str());
    std::printf("checkpoint = %s\n", opt.str("out").c_str());
    std::printf("log = %s\n", log_path.c_str());
    return 0;
}

// Builds the model a checkpoint describes and fails on preset mismatches.
vqt::Model<float> model_from_checkpoint(const std::string& path, const std::string& preset) {
    const vqt::ModelConfig cfg = vqt::read_checkpoint_config(path);
    if (!preset.empty()) {
        const vqt::ModelConfig wanted = vqt::ModelConfig::preset(preset);
        if (wanted.depth != cfg.depth || wanted.embed_dim != cfg.embed_dim ||
            wanted.patch != cfg.patch || wanted.clip_len != cfg.clip_len)
            throw ConfigError("checkpoint '" + path + "' does not match preset '" + preset + "'");
    }
    auto model = vqt::build_model<float>(cfg, 0);
    vqt::load_checkpoint(model.params, path);
    model.set_requires_grad(false);
    return model;
}

void dump_attention_records(const std::string& dir, const std::string& clip_path, double score,
                            const vqt::DiagnosticSink& sink) {
    fs::create_directories(dir);
    const std::string name = fs::path(clip_path).filename().string() + ".attn.txt";
    std::ofstream f(fs::path(dir) / name, std::ios::trunc);
    if (!f) throw DataError("score: cannot write attention dump in '" + dir + "'");
    char buf[64];
    f << "clip = " << clip_path << "\n";
    std::snprintf(buf, sizeof buf, "%.4f", score);
    f << "score = " << buf << "\n";
    for (const auto& r : sink.records) {
        std::snprintf(buf, sizeof buf, "%.6f", r.selection.threshold);
        f << "block = " << r.block << "  pathway = " << r.pathway << "  budget = " << r.budget
          << "  threshold = " << buf << "\n";
        f << "indices = ";
        for (size_t i = 0; i < r.selection.indices.size(); ++i)
            f << (i ? "," : "") << r.selection.indices[i];
        f << "\nprobes = ";
        for (size_t i = 0; i < r.selection.probe_indices.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%zu:%.6f", r.selection.probe_indices[i],
                          r.selection.probe_scores[i]);
            f << (i ? "," : "") << buf;
        }
        f << "\n";
        const size_t rows = r.clip_len ? r.attention_rows.size() / r.clip_len : 0;
        for (size_t row = 0; row < rows; ++row) {
            f << "attention_row " << row << " = ";
            for (size_t c = 0; c < r.clip_len; ++c) {
                std::snprintf(buf, sizeof buf, "%.4f", r.attention_rows[row * r.clip_len + c]);
                f << (c ? "," : "") << buf;
            }
            f << "\n";
        }
    }
}

int cmd_score(const std::vector<std::string>& args) {
    const std::vector<OptionSpec> specs = {
        {"checkpoint", OptKind::string_v, "", "trained checkpoint"},
        {"dump-attention", OptKind::string_v, "", "directory for per-block selection records"},
    };
    const Options opt = parse_options(args, specs, true);
    echo_config(opt, "score");
    if (opt.str("checkpoint").empty()) throw UsageError("score: --checkpoint is required");
    if (opt.positional.empty()) throw UsageError("score: give at least one clip path");

    auto model = model_from_checkpoint(opt.str("checkpoint"), opt.str("preset"));
    for (const auto& clip_path : opt.positional) {
        const vqt::RawClip clip = vqt::load_clip(clip_path);
        vqt::DiagnosticSink sink;
        const bool want_dump = !opt.str("dump-attention").empty();
        const double score =
            vqt::score_clip(model, clip, opt.u64("seed"), want_dump ? &sink : nullptr);
        std::printf("%s\t%.4f\n", clip_path.c_str(), score);
        if (want_dump) dump_attention_records(opt.str("dump-attention"), clip_path, score, sink);
    }
    return 0;
}

int cmd_eval(const std::vector<std::string>& args) {
    const std::vector<OptionSpec> specs = {
        {"checkpoint", OptKind::string_v, "", "trained checkpoint"},
        {"manifest", OptKind::string_v, "", "dataset manifest"},
        {"split", OptKind::string_v, "test", "split to evaluate (train|test)"},
        {"report", OptKind::string_v, "", "also write the report to this file"},
        {"sabotage-constant", OptKind::flag_v, "0",
         "testing hook: replace predictions with a constant"},
    };
    const Options opt = parse_options(args, specs, false);
    echo_config(opt, "eval");
    if (opt.str("checkpoint").empty()) throw UsageError("eval: --checkpoint is required");
    if (opt.str("manifest").empty()) throw UsageError("eval: --manifest is required");
    if (opt.str("split") != "train" && opt.str("split") != "test")
        throw UsageError("eval: --split must be train or test");

    const vqt::Manifest manifest = vqt::load_manifest(opt.str("manifest"));
    const std::string data_dir = fs::path(opt.str("manifest")).parent_path().string();
    const auto idx = manifest.split_indices(opt.str("split"));
    if (idx.empty())
        throw DataError("eval: split '" + opt.str("split") + "' is empty in this manifest");

    auto model = model_from_checkpoint(opt.str("checkpoint"), opt.str("preset"));
    std::vector<vqt::RawClip> clips;
    std::vector<double> labels;
    for (size_t i : idx) {
        clips.push_back(vqt::load_clip((fs::path(data_dir.empty() ? "." : data_dir) /
                                        manifest.entries[i].path)
                                           .string()));
        labels.push_back(manifest.entries[i].label);
    }
    std::vector<const vqt::RawClip*> clip_ptrs;
    for (const auto& c : clips) clip_ptrs.push_back(&c);
    auto preds = vqt::score_clips(model, clip_ptrs, opt.u64("seed"), worker_threads());
    if (opt.flag("sabotage-constant")) std::fill(preds.begin(), preds.end(), 3.0);

    vqt::MetricReport report = vqt::MetricReport::compute(preds, labels);
    report.checkpoint = opt.str("checkpoint");
    report.manifest = opt.str("manifest");
    report.split = opt.str("split");
    report.seed = opt.u64("seed");
    std::fputs(report.serialize().c_str(), stdout);
    if (!opt.str("report").empty()) {
        std::ofstream f(opt.str("report"), std::ios::trunc);
        if (!f) throw DataError("eval: cannot write report '" + opt.str("report") + "'");
        f << report.serialize();
    }
    return 0;
}

std::vector<size_t> parse_t_list(const std::string& list) {
    std::vector<size_t> out;
    size_t pos = 0;
    while (pos <= list.size()) {
        const size_t comma = list.find(',', pos);
        const std::string item =
            list.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        if (item.empty()) throw UsageError("bench: bad clip-length list '" + list + "'");
        try {
            const long long v = std::stoll(item);
            if (v < 2) throw UsageError("bench: clip lengths must be >= 2");
            out.push_back(size_t(v));
        } catch (const UsageError&) {
            throw;
        } catch (const std::exception&) {
            throw UsageError("bench: bad clip-length list '" + list + "'");
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return out;
}

int cmd_bench(const std::vector<std::string>& args) {
    const std::vector<OptionSpec> specs = {
        {"flops", OptKind::flag_v, "0", "analytic flop counts"},
        {"scaling", OptKind::flag_v, "0", "wall-clock scaling study"},
        {"T", OptKind::string_v, "", "clip length (flops) or comma list (scaling)"},
        {"N", OptKind::int_v, "196", "spatial locations per frame"},
        {"d", OptKind::int_v, "768", "embedding dimension"},
        {"reps", OptKind::int_v, "10", "repetitions per configuration"},
        {"csv", OptKind::string_v, "", "CSV output path (T,variant,flops,nanos)"},
    };
    const Options opt = parse_options(args, specs, false);
    echo_config(opt, "bench");
    if (opt.flag("flops") == opt.flag("scaling"))
        throw UsageError("bench: pick exactly one of --flops or --scaling");
    if (opt.str("T").empty()) throw UsageError("bench: --T is required");

    if (opt.flag("flops")) {
        const auto ts = parse_t_list(opt.str("T"));
        if (ts.size() != 1) throw UsageError("bench: --flops takes a single --T");
        const size_t t = ts[0];
        const size_t n = size_t(opt.integer("N")), d = size_t(opt.integer("d"));
        const auto plan = vqt::plan_pathways(t);
        const auto dense = vqt::flops_temporal(vqt::CostVariant::dense, t, n, d);
        const auto mptn = vqt::flops_temporal(vqt::CostVariant::mptn, t, n, d, &plan);
        std::printf("T = %zu  N = %zu  d = %zu\n", t, n, d);
        std::printf("budgets = ");
        for (size_t i = 0; i < plan.budgets.size(); ++i)
            std::printf("%s%zu", i ? "," : "", plan.budgets[i]);
        std::printf("\ndense_flops = %llu\nmptn_flops = %llu\n", dense, mptn);
        const size_t sum = plan.budget_sum();
        const size_t g = std::gcd(sum, t);
        std::printf("ratio = %zu/%zu = %.6f\n", sum / g, t / g, double(mptn) / double(dense));
        return 0;
    }

    const auto ts = parse_t_list(opt.str("T"));
    if (opt.integer("reps") <= 0) throw UsageError("bench: --reps must be positive");
    const auto result = vqt::scaling_study<float>(ts, size_t(opt.integer("reps")), opt.u64("seed"));
    for (const auto& r : result.reports)
        std::printf("T = %zu  variant = %s  flops = %llu  nanos = %.0f%s\n", r.t,
                    vqt::to_string(r.variant), r.flops, r.wall_nanos,
                    r.noisy ? "  (noisy: spread > 20%, rerun advised)" : "");
    std::printf("dense_slope = %.4f  stderr = %.4f\n", result.dense_slope, result.dense_stderr);
    std::printf("mptn_slope = %.4f  stderr = %.4f\n", result.mptn_slope, result.mptn_stderr);
    if (!opt.str("csv").empty()) {
        std::ofstream f(opt.str("csv"), std::ios::trunc);
        if (!f) throw DataError("bench: cannot write CSV '" + opt.str("csv") + "'");
        f << "T,variant,flops,nanos\n";
        char buf[128];
        for (const auto& r : result.reports) {
            std::snprintf(buf, sizeof buf, "%zu,%s,%llu,%.0f\n", r.t, vqt::to_string(r.variant),
                          r.flops, r.wall_nanos);
            f << buf;
        }
        std::printf("csv = %s\n", opt.str("csv").c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    try {
        if (args.empty()) throw UsageError("no command given");
        const std::string command = args[0];
        const std::vector<std::string> rest(args.begin() + 1, args.end());
        if (command == "gen") return cmd_gen(rest);
        if (command == "train") return cmd_train(rest);
        if (command == "score") return cmd_score(rest);
        if (command == "eval") return cmd_eval(rest);
        if (command == "bench") return cmd_bench(rest);
        if (command == "--help" || command == "help") {
            usage(stdout);
            return 0;
        }
        throw UsageError("unknown command '" + command + "'");
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n\n", e.what());
        usage(stderr);
        return 1;
    } catch (const vqt::NumericError& e) {  // includes undefined correlations
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {  // config/data/shape/contract
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}

#include "cli.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <nlohmann/json.hpp>

#include "CLI11.hpp"
#include "smmini/checkpoint.hpp"
#include "smmini/corpus.hpp"
#include "smmini/error.hpp"
#include "smmini/evalharness.hpp"
#include "smmini/rng.hpp"

namespace smmini::cli {

namespace {

namespace fs = std::filesystem;

[[noreturn]] void config_error(const std::string& what) {
    throw Error(ErrorKind::config, what);
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& raw) {
    const std::string text = trim(raw);
    T value{};
    const auto* first = text.data();
    const auto* last = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(first, last, value);
    if (text.empty() || ec != std::errc{} || ptr != last) {
        config_error("key '" + key + "': cannot parse '" + raw + "'");
    }
    return value;
}

bool parse_bool(const std::string& key, const std::string& raw) {
    const std::string text = trim(raw);
    if (text == "true" || text == "1" || text == "yes") return true;
    if (text == "false" || text == "0" || text == "no") return false;
    config_error("key '" + key + "': expected true/false, got '" + raw + "'");
}

std::string fmt_double(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

fs::path resolve(const fs::path& base, const std::string& raw) {
    fs::path p(trim(raw));
    if (p.empty() || p.is_absolute()) {
        return p;
    }
    return (base / p).lexically_normal();
}

std::vector<fs::path> parse_path_list(const fs::path& base, const std::string& raw) {
    std::vector<fs::path> out;
    std::stringstream ss(raw);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!trim(item).empty()) {
            out.push_back(resolve(base, item));
        }
    }
    return out;
}

using Setter =
    std::function<void(RunConfig&, const fs::path& base, const std::string& key, const std::string& value)>;

// "section.key" -> setter. Unknown keys are rejected so typos never silently fall back to defaults.
const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"run.seed", [](RunConfig& c, auto&, auto& k, auto& v) { c.seed = parse_number<std::uint64_t>(k, v); }},
        {"run.output_dir", [](RunConfig& c, auto& base, auto&, auto& v) { c.output_dir = resolve(base, v); }},
        {"run.threads", [](RunConfig& c, auto&, auto& k, auto& v) { c.threads = parse_number<unsigned>(k, v); }},
        {"corpus.manifest", [](RunConfig& c, auto& base, auto&, auto& v) { c.manifest = resolve(base, v); }},
        {"corpus.train_fraction",
         [](RunConfig& c, auto&, auto& k, auto& v) { c.train_fraction = parse_number<double>(k, v); }},
        {"model.d_model", [](RunConfig& c, auto&, auto& k, auto& v) { c.model.d_model = parse_number<int>(k, v); }},
        {"model.n_heads", [](RunConfig& c, auto&, auto& k, auto& v) { c.model.n_heads = parse_number<int>(k, v); }},
        {"model.n_layers", [](RunConfig& c, auto&, auto& k, auto& v) { c.model.n_layers = parse_number<int>(k, v); }},
        {"model.d_ff", [](RunConfig& c, auto&, auto& k, auto& v) { c.model.d_ff = parse_number<int>(k, v); }},
        {"model.max_sequence_length",
         [](RunConfig& c, auto&, auto& k, auto& v) { c.model.max_sequence_length = parse_number<int>(k, v); }},
        {"model.lora_r", [](RunConfig& c, auto&, auto& k, auto& v) { c.model.lora_r = parse_number<int>(k, v); }},
        {"model.lora_alpha",
         [](RunConfig& c, auto&, auto& k, auto& v) { c.model.lora_alpha = parse_number<double>(k, v); }},
        {"model.lora_dropout",
         [](RunConfig& c, auto&, auto& k, auto& v) { c.model.lora_dropout = parse_number<double>(k, v); }},
        {"model.lora_target",
         [](RunConfig& c, auto&, auto&, auto& v) { c.model.lora_target = parse_lora_target(trim(v)); }},
        {"model.init_std", [](RunConfig& c, auto&, auto& k, auto& v) { c.model.init_std = parse_number<double>(k, v); }},
        {"quant.enabled", [](RunConfig& c, auto&, auto& k, auto& v) { c.quantize = parse_bool(k, v); }},
        {"quant.mode", [](RunConfig& c, auto&, auto&, auto& v) { c.quant_mode = parse_quant_mode(trim(v)); }},
        {"quant.block_size",
         [](RunConfig& c, auto&, auto& k, auto& v) { c.block_size = parse_number<std::size_t>(k, v); }},
        {"train.sequence_length",
         [](RunConfig& c, auto&, auto& k, auto& v) { c.train.sequence_length = parse_number<int>(k, v); }},
        {"train.grad_accumulation_steps",
         [](RunConfig& c, auto&, auto& k, auto& v) { c.train.grad_accumulation_steps = parse_number<int>(k, v); }},
        {"train.minibatch_size",
         [](RunConfig& c, auto&, auto& k, auto& v) { c.train.minibatch_size = parse_number<int>(k, v); }},
        {"train.epochs", [](RunConfig& c, auto&, auto& k, auto& v) { c.train.epochs = parse_number<int>(k, v); }},
        {"train.optimizer", [](RunConfig& c, auto&, auto&, auto& v) { c.train.optimizer = parse_optimizer(trim(v)); }},
        {"train.lr_scheduler",
         [](RunConfig& c, auto&, auto&, auto& v) { c.train.lr_schedule = parse_lr_schedule(trim(v)); }},
        {"train.learning_rate",
         [](RunConfig& c, auto&, auto& k, auto& v) { c.train.learning_rate = parse_number<double>(k, v); }},
        {"train.beta1", [](RunConfig& c, auto&, auto& k, auto& v) { c.train.beta1 = parse_number<double>(k, v); }},
        {"train.beta2", [](RunConfig& c, auto&, auto& k, auto& v) { c.train.beta2 = parse_number<double>(k, v); }},
        {"train.eps", [](RunConfig& c, auto&, auto& k, auto& v) { c.train.eps = parse_number<double>(k, v); }},
        {"train.weight_decay",
         [](RunConfig& c, auto&, auto& k, auto& v) { c.train.weight_decay = parse_number<double>(k, v); }},
        {"train.grad_clip", [](RunConfig& c, auto&, auto& k, auto& v) { c.train.grad_clip = parse_number<double>(k, v); }},
        {"train.answer_only_loss",
         [](RunConfig& c, auto&, auto& k, auto& v) { c.train.answer_only_loss = parse_bool(k, v); }},
        {"train.max_steps",
         [](RunConfig& c, auto&, auto& k, auto& v) { c.train.max_steps = parse_number<std::int64_t>(k, v); }},
        {"train.checkpoint_every",
         [](RunConfig& c, auto&, auto& k, auto& v) { c.checkpoint_every = parse_number<std::int64_t>(k, v); }},
        {"eval.datasets", [](RunConfig& c, auto& base, auto&, auto& v) { c.eval_datasets = parse_path_list(base, v); }},
        {"eval.model_label", [](RunConfig& c, auto&, auto&, auto& v) { c.model_label = trim(v); }},
        {"eval.weights", [](RunConfig& c, auto&, auto&, auto& v) { c.eval_weights = trim(v); }},
    };
    return table;
}

void validate_run_config(const RunConfig& c) {
    c.model.validate();
    c.train.validate();
    if (!(c.train_fraction > 0.0 && c.train_fraction < 1.0)) {
        config_error("corpus.train_fraction must lie in (0, 1)");
    }
    if (c.threads < 1) {
        config_error("run.threads must be at least 1");
    }
    if (c.block_size < 2) {
        config_error("quant.block_size must be at least 2");
    }
    if (c.checkpoint_every < 0) {
        config_error("train.checkpoint_every must be non-negative");
    }
    if (c.eval_weights != "quantized" && c.eval_weights != "merged") {
        config_error("eval.weights must be 'quantized' or 'merged'");
    }
    if (c.train.sequence_length > c.model.max_sequence_length) {
        config_error("train.sequence_length exceeds model.max_sequence_length");
    }
}

// Training fields that may change between a checkpoint and a resumed run.
bool resumable_from(const TrainConfig& saved, const TrainConfig& now) {
    TrainConfig a = saved;
    a.epochs = now.epochs;
    a.max_steps = now.max_steps;
    a.threads = now.threads;
    return a == now;
}

std::string read_file(const fs::path& path, ErrorKind kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(kind, "cannot read " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(ErrorKind::config, "cannot write " + path.string());
    }
    out << content;
    if (!out) {
        throw Error(ErrorKind::config, "write failed for " + path.string());
    }
}

// Keeps the JSONL lines whose "step" is <= max_step; used when resuming.
std::string keep_lines_up_to(const fs::path& path, std::int64_t max_step) {
    std::ifstream in(path, std::ios::binary);
    std::string kept;
    std::string line;
    while (in && std::getline(in, line)) {
        const auto pos = line.find("\"step\":");
        if (pos == std::string::npos) {
            continue;
        }
        const std::int64_t step = std::strtoll(line.c_str() + pos + 7, nullptr, 10);
        if (step <= max_step) {
            kept += line + '\n';
        }
    }
    return kept;
}

void print_stats(std::ostream& out, const IngestStats& stats) {
    out << "source\tread\tkept\tdropped_malformed\tdropped_duplicate\n";
    auto line = [&](const std::string& tag, const SourceStats& s) {
        out << tag << '\t' << s.read << '\t' << s.kept << '\t' << s.dropped_malformed << '\t' << s.dropped_duplicate
            << '\n';
    };
    for (const auto& [tag, s] : stats.per_source) {
        line(tag, s);
    }
    line("TOTAL", stats.total());
}

void write_report(const fs::path& dir, std::span<const ReportCell> cells, std::ostream& out) {
    const RenderedReport r = render_report(cells);
    write_file(dir / "report.txt", r.text);
    write_file(dir / "report.tsv", r.tsv);
    out << r.text;
}

int exit_code_for(const Error& e) {
    if (e.kind() == ErrorKind::train) {
        const std::string what = e.what();
        if (what.find("non-finite") != std::string::npos) {
            return kExitNonFinite;
        }
    }
    return kExitConfig;
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const fs::path& base_dir) {
    boost::property_tree::ptree tree;
    try {
        std::istringstream in(text);
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        config_error(std::string("config syntax: ") + e.what());
    }
    RunConfig cfg;
    cfg.output_dir = resolve(base_dir, cfg.output_dir.string());
    const auto& table = setters();
    for (const auto& [section, body] : tree) {
        if (!body.data().empty()) {
            config_error("key '" + section + "' must live inside a [section]");
        }
        for (const auto& [key, node] : body) {
            const std::string full = section + "." + key;
            const auto it = table.find(full);
            if (it == table.end()) {
                config_error("unknown config key '" + full + "'");
            }
            it->second(cfg, base_dir, full, node.get_value<std::string>());
        }
    }
    if (const char* env = std::getenv("SMMINI_SEED"); env != nullptr && *env != '\0') {
        cfg.seed = parse_number<std::uint64_t>("SMMINI_SEED", env);
    }
    cfg.train.threads = cfg.threads;
    cfg.train.seed = derive_seed(cfg.seed, "train");
    validate_run_config(cfg);
    return cfg;
}

RunConfig load_run_config(const fs::path& path) {
    return parse_run_config(read_file(path, ErrorKind::config), path.parent_path());
}

std::uint64_t model_seed(const RunConfig& cfg) {
    return derive_seed(cfg.seed, "model");
}

std::uint64_t split_seed(const RunConfig& cfg) {
    return derive_seed(cfg.seed, "split");
}

std::uint64_t train_seed(const RunConfig& cfg) {
    return derive_seed(cfg.seed, "train");
}

std::string render_run_config(const RunConfig& c) {
    std::ostringstream o;
    auto path_list = [](const std::vector<fs::path>& ps) {
        std::string s;
        for (std::size_t i = 0; i < ps.size(); ++i) {
            s += (i ? ", " : "") + ps[i].string();
        }
        return s;
    };
    o << "# Resolved run configuration; every default is written out.\n"
      << "[run]\n"
      << "seed = " << c.seed << "\n"
      << "output_dir = " << c.output_dir.string() << "\n"
      << "threads = " << c.threads << "\n\n"
      << "[corpus]\n"
      << "manifest = " << c.manifest.string() << "\n"
      << "train_fraction = " << fmt_double(c.train_fraction) << "\n\n"
      << "[model]\n"
      << "d_model = " << c.model.d_model << "\n"
      << "n_heads = " << c.model.n_heads << "\n"
      << "n_layers = " << c.model.n_layers << "\n"
      << "d_ff = " << c.model.d_ff << "\n"
      << "# recipe: sequence length 1024\n"
      << "max_sequence_length = " << c.model.max_sequence_length << "\n"
      << "# recipe: LoRA r 64, alpha 16, dropout 0.1, all linear layers\n"
      << "lora_r = " << c.model.lora_r << "\n"
      << "lora_alpha = " << fmt_double(c.model.lora_alpha) << "\n"
      << "lora_dropout = " << fmt_double(c.model.lora_dropout) << "\n"
      << "lora_target = " << to_string(c.model.lora_target) << "\n"
      << "init_std = " << fmt_double(c.model.init_std) << "\n\n"
      << "[quant]\n"
      << "enabled = " << (c.quantize ? "true" : "false") << "\n"
      << "mode = " << to_string(c.quant_mode) << "\n"
      << "block_size = " << c.block_size << "\n\n"
      << "[train]\n"
      << "# recipe: sequence length 1024, accumulation 1, mini-batch 32, 5 epochs\n"
      << "sequence_length = " << c.train.sequence_length << "\n"
      << "grad_accumulation_steps = " << c.train.grad_accumulation_steps << "\n"
      << "minibatch_size = " << c.train.minibatch_size << "\n"
      << "epochs = " << c.train.epochs << "\n"
      << "# recipe: AdamW, constant schedule, learning rate 2e-4\n"
      << "optimizer = " << to_string(c.train.optimizer) << "\n"
      << "lr_scheduler = " << to_string(c.train.lr_schedule) << "\n"
      << "learning_rate = " << fmt_double(c.train.learning_rate) << "\n"
      << "beta1 = " << fmt_double(c.train.beta1) << "\n"
      << "beta2 = " << fmt_double(c.train.beta2) << "\n"
      << "eps = " << fmt_double(c.train.eps) << "\n"
      << "weight_decay = " << fmt_double(c.train.weight_decay) << "\n"
      << "grad_clip = " << fmt_double(c.train.grad_clip) << "\n"
      << "answer_only_loss = " << (c.train.answer_only_loss ? "true" : "false") << "\n"
      << "max_steps = " << c.train.max_steps << "\n"
      << "checkpoint_every = " << c.checkpoint_every << "\n\n"
      << "[eval]\n"
      << "datasets = " << path_list(c.eval_datasets) << "\n"
      << "model_label = " << c.model_label << "\n"
      << "weights = " << c.eval_weights << "\n";
    return o.str();
}

int cmd_ingest(const IngestOptions& opts, std::ostream& out, std::ostream& err) {
    try {
        const auto manifest = load_manifest(opts.manifest);
        auto [corpus, stats] = ingest_corpus(manifest, opts.threads);
        write_corpus_jsonl(corpus, opts.out);
        print_stats(out, stats);
        const SourceStats total = stats.total();
        const bool over_threshold = opts.max_bad_lines >= 0 ? total.dropped_malformed > opts.max_bad_lines
                                                            : total.dropped_malformed > 0 && total.kept == 0;
        if (over_threshold) {
            err << "error: " << total.dropped_malformed << " malformed lines exceed the allowed threshold\n";
            return kExitSchema;
        }
        return kExitOk;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitConfig;
    }
}

int cmd_train(const TrainOptions& opts, std::ostream& out, std::ostream& err) {
    try {
        RunConfig cfg = load_run_config(opts.config);
        if (opts.threads) {
            cfg.threads = *opts.threads;
            cfg.train.threads = *opts.threads;
        }
        if (cfg.manifest.empty()) {
            config_error("corpus.manifest is required for training");
        }
        fs::create_directories(cfg.output_dir);
        write_file(cfg.output_dir / "resolved_config.ini", render_run_config(cfg));

        const auto manifest = load_manifest(cfg.manifest);
        auto [corpus, stats] = ingest_corpus(manifest, cfg.threads);
        if (corpus.empty()) {
            config_error("the manifest yields no usable records");
        }
        Corpus train_set;
        Corpus valid_set;
        if (corpus.size() >= 2) {
            std::tie(train_set, valid_set) = split(corpus, cfg.train_fraction, split_seed(cfg));
        }
        if (train_set.empty()) {
            train_set = corpus;
            valid_set = Corpus{};
        }
        const auto max_len = static_cast<std::size_t>(cfg.train.sequence_length);
        std::size_t skipped = 0;
        auto train_data = pack_corpus(train_set, max_len, cfg.train.answer_only_loss, &skipped);
        std::vector<TrainingSequence> valid_data;
        if (!valid_set.empty()) {
            for (const auto& rec : valid_set.records) {
                try {
                    valid_data.push_back(pack_example(render_prompt(rec), max_len, cfg.train.answer_only_loss));
                } catch (const Error&) {
                }
            }
        }
        out << "corpus: " << corpus.size() << " records, train " << train_data.size() << " (skipped " << skipped
            << "), validation " << valid_data.size() << '\n';

        const fs::path ckpt_path = cfg.output_dir / "checkpoint.bin";
        const fs::path metrics_path = cfg.output_dir / "metrics.jsonl";
        const fs::path valid_path = cfg.output_dir / "validation.jsonl";

        std::optional<Trainer> trainer;
        std::string metrics_prefix;
        std::string valid_prefix;
        if (opts.resume && fs::exists(ckpt_path)) {
            Checkpoint ckpt = load_checkpoint(ckpt_path);
            if (!(ckpt.params.config == cfg.model) || !resumable_from(ckpt.train_config, cfg.train)) {
                config_error("checkpoint " + ckpt_path.string() + " was written by an incompatible config");
            }
            ckpt.train_config = cfg.train;
            metrics_prefix = keep_lines_up_to(metrics_path, ckpt.step);
            valid_prefix = keep_lines_up_to(valid_path, ckpt.step);
            out << "resuming from step " << ckpt.step << '\n';
            trainer.emplace(std::move(train_data), std::move(ckpt));
        } else {
            Parameters params = init_model(cfg.model, model_seed(cfg));
            if (cfg.quantize) {
                quantize_base(params, cfg.block_size, cfg.quant_mode);
            }
            trainer.emplace(std::move(train_data), std::move(params), cfg.train);
        }

        std::ofstream metrics(metrics_path, std::ios::binary | std::ios::trunc);
        std::ofstream validation(valid_path, std::ios::binary | std::ios::trunc);
        if (!metrics || !validation) {
            config_error("cannot write logs under " + cfg.output_dir.string());
        }
        metrics << metrics_prefix;
        validation << valid_prefix;

        TrainCallbacks callbacks;
        callbacks.on_step = [&](const StepMetrics& m) {
            metrics << to_jsonl(m) << '\n';
            metrics.flush();
            if (cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0) {
                save_checkpoint(ckpt_path, trainer->checkpoint());
            }
        };
        callbacks.on_epoch_end = [&](int epoch, const Parameters& params) {
            std::ostringstream line;
            line << "{\"epoch\":" << epoch << ",\"step\":" << trainer->global_step();
            if (!valid_data.empty()) {
                line << ",\"val_loss\":" << fmt_double(mean_loss(params, valid_data, cfg.threads));
            }
            line << "}\n";
            validation << line.str();
            validation.flush();
        };
        trainer->run(callbacks);

        save_checkpoint(ckpt_path, trainer->checkpoint());
        out << "trained " << trainer->global_step() << " steps; checkpoint " << ckpt_path.string() << '\n';
        return kExitOk;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return exit_code_for(e);
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return kExitConfig;
    }
}

int cmd_eval(const EvalOptions& opts, std::ostream& out, std::ostream& err) {
    try {
        fs::create_directories(opts.out);
        if (opts.fixture) {
            const auto cells = published_comparison_cells();
            write_report(opts.out, cells, out);
            return kExitOk;
        }
        if (!opts.checkpoint) {
            config_error("eval needs a checkpoint (or --fixture)");
        }
        if (opts.weights != "quantized" && opts.weights != "merged") {
            config_error("--weights must be 'quantized' or 'merged'");
        }
        Checkpoint ckpt;
        try {
            ckpt = load_checkpoint(*opts.checkpoint);
        } catch (const Error& e) {
            err << "error: " << e.what() << '\n';
            return kExitConfig;
        }
        Parameters params = opts.weights == "merged" ? merge_adapters(ckpt.params) : std::move(ckpt.params);
        const TransformerScorer scorer(std::move(params));

        std::vector<EvalReportRow> rows;
        std::ofstream predictions;
        if (opts.predictions) {
            predictions.open(opts.out / "predictions.jsonl", std::ios::binary | std::ios::trunc);
        }
        for (const auto& path : opts.datasets) {
            const auto items = load_eval_items(path);
            if (items.empty()) {
                err << "error: dataset " << path.string() << " has no items\n";
                return kExitEmptyDataset;
            }
            const EvalResult res = evaluate(scorer, items, opts.label, opts.threads);
            if (opts.predictions) {
                for (std::size_t i = 0; i < items.size(); ++i) {
                    predictions << prediction_jsonl(items[i], res.predictions[i], i) << '\n';
                }
            }
            rows.push_back(res.row);
        }
        if (rows.empty()) {
            config_error("no evaluation datasets given");
        }
        write_file(opts.out / "rows.tsv", rows_tsv(rows));
        nlohmann::json info = {{"checkpoint", opts.checkpoint->string()},
                               {"weights", opts.weights},
                               {"label", opts.label},
                               {"step", ckpt.step}};
        write_file(opts.out / "eval_info.json", info.dump(2) + "\n");
        std::vector<ReportCell> cells;
        for (const auto& r : rows) {
            cells.push_back(to_cell(r));
        }
        out << "weights: " << opts.weights << '\n';
        write_report(opts.out, cells, out);
        return kExitOk;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return kExitConfig;
    }
}

int cmd_report(const ReportOptions& opts, std::ostream& out, std::ostream& err) {
    try {
        fs::create_directories(opts.out);
        std::vector<ReportCell> cells;
        if (opts.fixture) {
            cells = published_comparison_cells();
        }
        for (const auto& path : opts.rows) {
            for (const auto& row : parse_rows_tsv(read_file(path, ErrorKind::report))) {
                cells.push_back(to_cell(row));
            }
        }
        write_report(opts.out, cells, out);
        return kExitOk;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const fs::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return kExitConfig;
    }
}

int run_cli(int argc, char** argv) {
    CLI::App app{"smmini: instruction-tuning and multiple-choice evaluation pipeline"};
    app.require_subcommand(1);

    IngestOptions ingest;
    auto* ingest_cmd = app.add_subcommand("ingest", "Normalize and deduplicate JSONL sources listed in a manifest");
    ingest_cmd->add_option("manifest", ingest.manifest, "Manifest file: '<source_tag> <path>' per line")->required();
    ingest_cmd->add_option("out", ingest.out, "Output corpus JSONL")->required();
    ingest_cmd->add_option("--max-bad-lines", ingest.max_bad_lines,
                           "Exit 2 if more malformed lines than this (default: only if nothing is kept)");
    ingest_cmd->add_option("--threads", ingest.threads, "Parallel file parsing")->check(CLI::PositiveNumber);

    TrainOptions train;
    unsigned train_threads = 0;
    auto* train_cmd = app.add_subcommand("train", "LoRA fine-tuning over a quantized base model");
    train_cmd->add_option("config", train.config, "Run configuration (INI)")->required();
    train_cmd->add_flag("--resume", train.resume, "Continue from <output_dir>/checkpoint.bin");
    auto* train_threads_opt = train_cmd->add_option("--threads", train_threads, "Worker threads (1 = reproducible)")
                                  ->check(CLI::PositiveNumber);

    EvalOptions eval;
    std::vector<std::string> eval_positionals;
    auto* eval_cmd = app.add_subcommand("eval", "Multiple-choice evaluation of a checkpoint");
    eval_cmd->add_option("inputs", eval_positionals, "Checkpoint followed by one or more dataset JSONL files");
    eval_cmd->add_option("--out", eval.out, "Output directory");
    eval_cmd->add_option("--label", eval.label, "Model label used in the report");
    eval_cmd->add_option("--weights", eval.weights, "quantized (adapter form) or merged");
    eval_cmd->add_flag("--predictions", eval.predictions, "Write per-item predictions.jsonl");
    eval_cmd->add_flag("--fixture", eval.fixture, "Render the published comparison table instead");
    eval_cmd->add_option("--threads", eval.threads, "Parallel item scoring")->check(CLI::PositiveNumber);

    ReportOptions report;
    auto* report_cmd = app.add_subcommand("report", "Merge rows.tsv files into one comparison table");
    report_cmd->add_option("rows", report.rows, "rows.tsv files written by eval");
    report_cmd->add_option("--out", report.out, "Output directory");
    report_cmd->add_flag("--fixture", report.fixture, "Include the published comparison cells");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    if (ingest_cmd->parsed()) {
        return cmd_ingest(ingest, std::cout, std::cerr);
    }
    if (train_cmd->parsed()) {
        if (train_threads_opt->count() > 0) {
            train.threads = train_threads;
        }
        return cmd_train(train, std::cout, std::cerr);
    }
    if (eval_cmd->parsed()) {
        if (!eval_positionals.empty()) {
            eval.checkpoint = eval_positionals.front();
            eval.datasets.assign(eval_positionals.begin() + 1, eval_positionals.end());
        }
        return cmd_eval(eval, std::cout, std::cerr);
    }
    return cmd_report(report, std::cout, std::cerr);
}

}  // namespace smmini::cli

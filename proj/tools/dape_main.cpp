// Command-line front end: train / eval / sweep / dump-bias / bench.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "dape/config.hpp"
#include "dape/eval.hpp"
#include "dape/train.hpp"

namespace {

using namespace dape;

std::string out_root(const std::string& flag_value, const RunConfig& cfg) {
    if (!flag_value.empty()) return flag_value;
    if (!cfg.out_dir.empty()) return cfg.out_dir;
    if (const char* env = std::getenv("DAPE_OUT_ROOT")) return env;
    return "runs";
}

RunConfig load_with_overrides(const std::string& path, const std::vector<std::string>& overrides,
                              long seed_flag) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config error: cannot open '" + path + "'");
    nlohmann::json j;
    in >> j;
    for (const auto& kv : overrides) apply_override(j, kv);
    if (seed_flag >= 0) j["train"]["seed"] = seed_flag;
    return run_config_from_json(j);
}

std::vector<int> parse_int_list(const std::string& csv) {
    std::vector<int> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stoi(item));
    }
    return out;
}

std::vector<std::string> parse_str_list(const std::string& csv) {
    std::vector<std::string> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

// "kerple" or "dape_kerple" -> PeConfig patch
void apply_pe_name(RunConfig& cfg, const std::string& name) {
    if (name.rfind("dape_", 0) == 0) {
        cfg.model.pe.dape = true;
        cfg.model.pe.kind = pe_kind_from_name(name.substr(5));
    } else {
        cfg.model.pe.dape = false;
        cfg.model.pe.kind = pe_kind_from_name(name);
    }
    cfg.model.validate();
}

void write_resolved_config(const RunConfig& cfg, const std::string& run_dir) {
    std::filesystem::create_directories(run_dir);
    std::ofstream out(run_dir + "/config.json", std::ios::trunc);
    out << to_json(cfg).dump(2) << "\n";
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              long seed_flag, const std::string& out_flag) {
    RunConfig cfg = load_with_overrides(config_path, overrides, seed_flag);
    std::string run_dir = out_root(out_flag, cfg) + "/" + run_dir_name(cfg);
    write_resolved_config(cfg, run_dir);
    TrainResult result = train_run(cfg, run_dir);
    std::cout << "run_dir: " << run_dir << "\n"
              << "checkpoint: " << result.checkpoint_path << "\n"
              << "first_loss: " << result.first_loss << "  final_loss: " << result.final_loss
              << "\n";
    return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& text_path, const std::string& task,
             const std::string& lengths_csv, int k, int samples, long seed,
             const std::string& protocol, const std::string& out_flag) {
    Model model = load_checkpoint(ckpt);
    std::string out_dir = out_flag.empty()
                              ? std::filesystem::path(ckpt).parent_path().string()
                              : out_flag;
    if (out_dir.empty()) out_dir = ".";
    std::vector<int> lengths = parse_int_list(lengths_csv);
    EvalReport report;
    if (model.config().mode == ModelMode::encoder_placeholder) {
        if (task.empty()) throw std::runtime_error("config error: eval of a task model needs --task");
        TaskSpec spec = task_spec(task_from_name(task));
        if (lengths.empty())
            for (int len = spec.eval_len_min; len <= spec.eval_len_min + 9; ++len)
                lengths.push_back(len);
        report = che_accuracy(model, spec, lengths, samples, static_cast<std::uint64_t>(seed));
    } else {
        if (text_path.empty()) throw std::runtime_error("config error: eval of an LM needs --text");
        if (lengths.empty()) lengths = {128, 256, 512};
        std::vector<int> bytes = load_bytes(text_path);
        report = length_sweep(model, bytes, lengths, k, protocol);
    }
    report.config_hash = model_config_hash(model.config());
    write_report_csv(report, out_dir + "/report.csv");
    write_report_jsonl(report, out_dir + "/report.jsonl");
    std::cout << "report: " << out_dir << "/report.csv\n";
    for (const auto& row : report.rows)
        std::cout << row.metric << " @ " << row.eval_length << ": " << row.mean << "\n";
    return 0;
}

struct SweepCell {
    std::string pe;
    std::uint64_t seed = 0;
    bool ok = false;
    EvalReport report;
    std::string error;
};

int cmd_sweep(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& pe_csv, const std::string& seeds_csv, int jobs,
              const std::string& out_flag) {
    RunConfig base = load_with_overrides(config_path, overrides, -1);
    std::vector<std::string> pe_list = parse_str_list(pe_csv);
    std::vector<int> seeds = parse_int_list(seeds_csv);
    if (pe_list.empty() || seeds.empty())
        throw std::runtime_error("config error: sweep needs at least one pe and one seed");
    std::string root = out_root(out_flag, base);

    std::vector<SweepCell> cells;
    for (const auto& pe : pe_list)
        for (int seed : seeds) {
            SweepCell cell;
            cell.pe = pe;
            cell.seed = static_cast<std::uint64_t>(seed);
            cells.push_back(cell);
        }

    std::atomic<std::size_t> next{0};
    std::mutex io_mutex;
    auto worker = [&] {
        for (;;) {
            std::size_t idx = next.fetch_add(1);
            if (idx >= cells.size()) return;
            SweepCell& cell = cells[idx];
            try {
                RunConfig cfg = base;
                apply_pe_name(cfg, cell.pe);
                cfg.train.seed = cell.seed;
                std::string run_dir = root + "/" + run_dir_name(cfg);
                {
                    std::lock_guard<std::mutex> lock(io_mutex);
                    std::cout << "[sweep] " << cell.pe << " seed " << cell.seed << " -> " << run_dir
                              << "\n";
                }
                write_resolved_config(cfg, run_dir);
                train_run(cfg, run_dir);
                Model model = load_checkpoint(run_dir + "/checkpoint.bin");
                EvalReport report;
                if (cfg.data.source == "task") {
                    TaskSpec spec = task_spec(task_from_name(cfg.data.task));
                    std::vector<int> lengths = cfg.eval.lengths;
                    if (lengths.empty())
                        for (int len = cfg.train.train_len + 1; len <= 2 * cfg.train.train_len; ++len)
                            lengths.push_back(len);
                    report = che_accuracy(model, spec, lengths, cfg.eval.samples_per_length,
                                          cell.seed, cfg.eval.batch_size);
                } else {
                    std::vector<int> bytes = load_bytes(cfg.data.text_path);
                    report = length_sweep(model, bytes, cfg.eval_lengths(), cfg.eval.k,
                                          cfg.eval.protocol == "both" ? "both" : cfg.eval.protocol,
                                          cfg.eval.batch_size);
                }
                report.config_hash = model_config_hash(effective_model_config(cfg));
                write_report_csv(report, run_dir + "/report.csv");
                write_report_jsonl(report, run_dir + "/report.jsonl");
                cell.report = report;
                cell.ok = true;
            } catch (const std::exception& e) {
                cell.error = e.what();
                std::lock_guard<std::mutex> lock(io_mutex);
                std::cerr << "[sweep] " << cell.pe << " seed " << cell.seed << " failed: " << e.what()
                          << "\n";
            }
        }
    };
    int thread_count = std::max(1, jobs);
    std::vector<std::thread> pool;
    for (int t = 0; t < thread_count; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();

    // aggregate per pe; missing cells keep the table honest
    bool any_failed = false;
    std::vector<std::pair<std::string, EvalReport>> aggregated;
    for (const auto& pe : pe_list) {
        std::vector<EvalReport> runs;
        for (const auto& cell : cells)
            if (cell.pe == pe && cell.ok) runs.push_back(cell.report);
        if (runs.size() != seeds.size()) any_failed = true;
        if (!runs.empty()) aggregated.emplace_back(pe, seed_aggregate(runs));
    }

    std::filesystem::create_directories(root);
    std::ofstream table(root + "/sweep_table.csv", std::ios::trunc);
    table << "pe,eval_length,metric,mean,std,seed_count\n";
    for (const auto& [pe, report] : aggregated)
        for (const auto& row : report.rows) {
            table << pe << "," << row.eval_length << "," << row.metric << "," << row.mean << ",";
            if (row.seed_count >= 2) table << row.stddev;
            table << "," << row.seed_count << "\n";
        }
    for (const auto& pe : pe_list) {
        bool have = false;
        for (const auto& [name, report] : aggregated) have |= name == pe;
        if (!have) table << pe << ",,,NA,,0\n";
    }

    std::ofstream wins(root + "/sweep_wins.csv", std::ios::trunc);
    wins << "pe_a,pe_b,a_wins,b_wins,ties\n";
    for (std::size_t i = 0; i < aggregated.size(); ++i)
        for (std::size_t j = i + 1; j < aggregated.size(); ++j) {
            bool higher_better = aggregated[i].second.protocol == "accuracy";
            PairedWins pw =
                paired_wins(aggregated[i].second, aggregated[j].second, higher_better);
            wins << aggregated[i].first << "," << aggregated[j].first << "," << pw.a_wins << ","
                 << pw.b_wins << "," << pw.ties << "\n";
        }

    std::cout << "sweep table: " << root << "/sweep_table.csv\n";
    return any_failed ? 1 : 0;
}

int cmd_dump_bias(const std::string& ckpt, int length, const std::string& text_path,
                  const std::string& task, int layer, long sample_seed, const std::string& out_file) {
    Model model = load_checkpoint(ckpt);
    std::vector<int> tokens;
    if (!text_path.empty()) {
        std::vector<int> bytes = load_bytes(text_path);
        if (static_cast<int>(bytes.size()) < length)
            throw std::runtime_error("too short error: corpus smaller than the requested length");
        Rng rng(static_cast<std::uint64_t>(sample_seed));
        int start = rng.uniform_int(0, static_cast<int>(bytes.size()) - length);
        tokens.push_back(kByteBos);
        for (int i = 0; i < length - 1; ++i) tokens.push_back(bytes[start + i]);
    } else if (!task.empty()) {
        TaskSpec spec = task_spec(task_from_name(task));
        Rng rng(static_cast<std::uint64_t>(sample_seed));
        TaskInstance inst = generate(spec, length, rng);
        tokens = inst.input_tokens;
        tokens.insert(tokens.end(), inst.target_tokens.size(),
                      model.config().placeholder_id);
    } else {
        throw std::runtime_error("config error: dump-bias needs --text or --task");
    }
    auto rows = dump_bias_rows(model, tokens, layer);
    std::string path = out_file.empty() ? "bias.csv" : out_file;
    write_bias_csv(rows, path);
    std::cout << "bias dump: " << path << " (" << rows.size() << " rows)\n";
    return 0;
}

int cmd_bench(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& pe_csv, const std::string& lengths_csv, int reps,
              const std::string& out_file) {
    RunConfig base = load_with_overrides(config_path, overrides, -1);
    std::vector<std::string> pe_list = parse_str_list(pe_csv);
    if (pe_list.empty())
        pe_list = {"rope", "t5_bias", "alibi", "kerple", "fire", "dape_kerple"};
    std::vector<int> lengths = parse_int_list(lengths_csv);
    if (lengths.empty()) lengths = {256, 512};
    std::vector<std::pair<std::string, ModelConfig>> configs;
    for (const auto& pe : pe_list) {
        RunConfig cfg = base;
        apply_pe_name(cfg, pe);
        configs.emplace_back(pe, effective_model_config(cfg));
    }
    auto rows = timing_bench(configs, lengths, reps);
    std::string path = out_file.empty() ? "timings.csv" : out_file;
    write_timing_csv(rows, path);
    std::cout << "timings: " << path << "\n";
    for (const auto& row : rows)
        std::cout << row.pe_name << " n=" << row.seq_len << ": " << row.wall_ms << " ms (ratio "
                  << row.ratio_vs_dape << ")\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale laboratory for data-adaptive positional encoding"};
    app.require_subcommand(1);

    std::string config_path, out_flag, ckpt, text_path, task, lengths_csv, pe_csv, seeds_csv;
    std::string protocol = "both", out_file;
    std::vector<std::string> overrides;
    long seed_flag = -1, sample_seed = 0;
    int k = 256, samples = 64, jobs = 1, layer = 0, reps = 5, length = 128;

    auto* train = app.add_subcommand("train", "train a model from a config file");
    train->add_option("--config", config_path, "config JSON path")->required();
    train->add_option("--seed", seed_flag, "override train.seed");
    train->add_option("--out", out_flag, "output root directory");
    train->add_option("--override", overrides, "dot-path override key=value");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    eval_cmd->add_option("--ckpt", ckpt, "checkpoint path")->required();
    eval_cmd->add_option("--text", text_path, "byte corpus for LM perplexity");
    eval_cmd->add_option("--task", task, "task name for accuracy evaluation");
    eval_cmd->add_option("--lengths", lengths_csv, "comma-separated evaluation lengths");
    eval_cmd->add_option("--k", k, "scored suffix length (last_k protocol)");
    eval_cmd->add_option("--samples", samples, "samples per length (task mode)");
    eval_cmd->add_option("--seed", sample_seed, "evaluation sampling seed");
    eval_cmd->add_option("--protocol", protocol, "last_k | non_overlapping | both");
    eval_cmd->add_option("--out", out_flag, "output directory");

    auto* sweep = app.add_subcommand("sweep", "train and compare several encodings and seeds");
    sweep->add_option("--config", config_path, "config JSON path")->required();
    sweep->add_option("--pe", pe_csv, "comma-separated encodings, e.g. kerple,dape_kerple")
        ->required();
    sweep->add_option("--seeds", seeds_csv, "comma-separated seeds")->required();
    sweep->add_option("--jobs", jobs, "parallel runs");
    sweep->add_option("--out", out_flag, "output root directory");
    sweep->add_option("--override", overrides, "dot-path override key=value");

    auto* dump = app.add_subcommand("dump-bias", "dump per-head bias columns for the last query");
    dump->add_option("--ckpt", ckpt, "checkpoint path")->required();
    dump->add_option("--len", length, "sequence length")->required();
    dump->add_option("--text", text_path, "byte corpus sample source");
    dump->add_option("--task", task, "task sample source");
    dump->add_option("--layer", layer, "layer to capture");
    dump->add_option("--sample-seed", sample_seed, "sample selection seed");
    dump->add_option("--out", out_file, "output CSV path");

    auto* bench = app.add_subcommand("bench", "time forward+backward steps per encoding");
    bench->add_option("--config", config_path, "config JSON path")->required();
    bench->add_option("--pe", pe_csv, "comma-separated encodings");
    bench->add_option("--lengths", lengths_csv, "comma-separated sequence lengths");
    bench->add_option("--reps", reps, "timed repetitions per cell");
    bench->add_option("--out", out_file, "output CSV path");
    bench->add_option("--override", overrides, "dot-path override key=value");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(config_path, overrides, seed_flag, out_flag);
        if (eval_cmd->parsed())
            return cmd_eval(ckpt, text_path, task, lengths_csv, k, samples, sample_seed, protocol,
                            out_flag);
        if (sweep->parsed())
            return cmd_sweep(config_path, overrides, pe_csv, seeds_csv, jobs, out_flag);
        if (dump->parsed())
            return cmd_dump_bias(ckpt, length, text_path, task, layer, sample_seed, out_file);
        if (bench->parsed())
            return cmd_bench(config_path, overrides, pe_csv, lengths_csv, reps, out_file);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

// Command-line entry point: data generation, classifier and decision-maker
// training, evaluation, ablation and seed sweeps. Every run writes run.json
// echoing the fully resolved configuration; all randomness flows from --seed.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "posnegdm/checkpoint.hpp"
#include "posnegdm/evaluation.hpp"
#include "posnegdm/reporting.hpp"
#include "posnegdm/synthetic.hpp"
#include "posnegdm/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace posnegdm;

namespace {

// flag > config file > struct default
template <typename T>
void cfg_apply(CLI::App* sub, const std::map<std::string, std::string>& cfg,
               const std::string& name, T& var) {
    if (sub->count("--" + name) > 0) return;
    auto it = cfg.find(name);
    if (it == cfg.end()) return;
    if constexpr (std::is_same_v<T, std::string>) {
        var = it->second;
    } else if constexpr (std::is_same_v<T, bool>) {
        var = it->second == "1" || it->second == "true";
    } else {
        std::istringstream ss(it->second);
        if (!(ss >> var))
            throw std::runtime_error("config file: cannot parse '" + it->second + "' for key " +
                                     name);
    }
}

std::string resolve_out_dir(CLI::App* sub, const std::string& flag_value) {
    if (sub->count("--out") > 0) return flag_value;
    if (const char* env = std::getenv("POSNEGDM_OUT")) return env;
    return flag_value;
}

void write_run_json(const std::string& dir, const json& resolved) {
    fs::create_directories(dir);
    write_text_file((fs::path(dir) / "run.json").string(), resolved.dump(2) + "\n");
}

std::vector<double> parse_double_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.push_back(std::stod(item));
    }
    if (out.empty()) throw std::invalid_argument("empty value list '" + s + "'");
    return out;
}

std::vector<uint64_t> parse_seed_list(const std::string& s) {
    std::vector<uint64_t> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        out.push_back(std::stoull(item));
    }
    if (out.empty()) throw std::invalid_argument("empty seed list '" + s + "'");
    return out;
}

DatasetSplit load_split(const std::string& data_path, double test_fraction, uint64_t seed) {
    return normalize_states(split_train_test(load_trajectories_csv(data_path), test_fraction, seed));
}

// Per-state survival labels for the classifier (1 = trajectory survived).
void states_and_labels(const std::vector<Trajectory>& trajs,
                       std::vector<std::vector<float>>& states, std::vector<int>& labels) {
    for (const auto& t : trajs)
        for (const auto& s : t.states) {
            states.emplace_back(s.begin(), s.end());
            labels.push_back(t.outcome == Outcome::positive ? 1 : 0);
        }
}

MortalityClassifier<float> load_frozen_mc(const std::string& prefix) {
    auto mc = load_mortality_classifier<float>(prefix);
    mc.freeze();
    return mc;
}

struct CommonDataFlags {
    std::string data, config, out = "out";
    double test_fraction = 0.3;
    uint64_t seed = 1;

    void attach(CLI::App* sub, bool data_required = true) {
        auto* d = sub->add_option("--data", data, "trajectory CSV to load");
        if (data_required) d->required();
        sub->add_option("--test-fraction", test_fraction, "held-out trajectory fraction");
        sub->add_option("--seed", seed, "root seed (split, init, batching, dropout)");
        sub->add_option("--out", out, "output directory");
        sub->add_option("--config", config, "flat key-value config file");
    }

    std::map<std::string, std::string> file_cfg() const {
        return config.empty() ? std::map<std::string, std::string>{} : load_flat_config(config);
    }

    void apply(CLI::App* sub, const std::map<std::string, std::string>& cfg) {
        cfg_apply(sub, cfg, "data", data);
        cfg_apply(sub, cfg, "test-fraction", test_fraction);
        cfg_apply(sub, cfg, "seed", seed);
        cfg_apply(sub, cfg, "out", out);
        out = resolve_out_dir(sub, out);
    }

    json to_json() const {
        return {{"data", data}, {"test_fraction", test_fraction}, {"seed", seed}, {"out", out}};
    }
};

struct DMFlags {
    DualSightConfig model;
    DMTrainConfig train;
    std::string mc_prefix;

    void attach(CLI::App* sub) {
        sub->add_option("--mc", mc_prefix, "mortality-classifier checkpoint prefix");
        sub->add_option("--layers", model.n_layers, "transformer blocks");
        sub->add_option("--heads", model.n_heads, "attention heads");
        sub->add_option("--embed", model.embed_dim, "embedding width");
        sub->add_option("--context", model.context_len, "context window K");
        sub->add_option("--dropout", model.dropout, "dropout rate");
        sub->add_option("--alpha", train.weights.alpha, "action-loss weight");
        sub->add_option("--beta", train.weights.beta, "state-loss weight");
        sub->add_option("--gamma", train.weights.gamma, "survival-loss weight");
        sub->add_option("--eta", train.weights.eta, "negative-trajectory action weight");
        sub->add_option("--neg-ce-cap", train.weights.neg_ce_cap, "per-step CE cap on negatives");
        sub->add_option("--lr", train.learning_rate, "base learning rate");
        sub->add_option("--weight-decay", train.weight_decay, "decoupled weight decay");
        sub->add_option("--warmup", train.warmup_steps, "linear warmup steps");
        sub->add_option("--batch", train.batch_size, "windows per batch");
        sub->add_option("--iterations", train.iterations, "training iterations");
    }

    void apply(CLI::App* sub, const std::map<std::string, std::string>& cfg) {
        cfg_apply(sub, cfg, "mc", mc_prefix);
        cfg_apply(sub, cfg, "layers", model.n_layers);
        cfg_apply(sub, cfg, "heads", model.n_heads);
        cfg_apply(sub, cfg, "embed", model.embed_dim);
        cfg_apply(sub, cfg, "context", model.context_len);
        cfg_apply(sub, cfg, "dropout", model.dropout);
        cfg_apply(sub, cfg, "alpha", train.weights.alpha);
        cfg_apply(sub, cfg, "beta", train.weights.beta);
        cfg_apply(sub, cfg, "gamma", train.weights.gamma);
        cfg_apply(sub, cfg, "eta", train.weights.eta);
        cfg_apply(sub, cfg, "neg-ce-cap", train.weights.neg_ce_cap);
        cfg_apply(sub, cfg, "lr", train.learning_rate);
        cfg_apply(sub, cfg, "weight-decay", train.weight_decay);
        cfg_apply(sub, cfg, "warmup", train.warmup_steps);
        cfg_apply(sub, cfg, "batch", train.batch_size);
        cfg_apply(sub, cfg, "iterations", train.iterations);
    }

    json to_json() const {
        return {{"mc", mc_prefix},
                {"layers", model.n_layers},
                {"heads", model.n_heads},
                {"embed", model.embed_dim},
                {"context", model.context_len},
                {"dropout", model.dropout},
                {"alpha", train.weights.alpha},
                {"beta", train.weights.beta},
                {"gamma", train.weights.gamma},
                {"eta", train.weights.eta},
                {"neg_ce_cap", train.weights.neg_ce_cap},
                {"lr", train.learning_rate},
                {"weight_decay", train.weight_decay},
                {"warmup", train.warmup_steps},
                {"batch", train.batch_size},
                {"iterations", train.iterations}};
    }
};

int cmd_generate_data(CLI::App* sub, CohortConfig& cfg, std::string& out, std::string& config) {
    auto file_cfg = config.empty() ? std::map<std::string, std::string>{} : load_flat_config(config);
    cfg_apply(sub, file_cfg, "n", cfg.n_trajectories);
    cfg_apply(sub, file_cfg, "state-dim", cfg.state_dim);
    cfg_apply(sub, file_cfg, "min-len", cfg.min_len);
    cfg_apply(sub, file_cfg, "max-len", cfg.max_len);
    cfg_apply(sub, file_cfg, "mortality", cfg.mortality_target);
    cfg_apply(sub, file_cfg, "seed", cfg.seed);
    cfg_apply(sub, file_cfg, "out", out);
    out = resolve_out_dir(sub, out);

    auto cohort = generate_synthetic_cohort(cfg);
    fs::create_directories(out);
    save_trajectories_csv(cohort, (fs::path(out) / "trajectories.csv").string());

    long negatives = 0;
    for (const auto& t : cohort)
        if (t.outcome == Outcome::negative) ++negatives;
    json resolved{{"subcommand", "generate-data"},
                  {"n", cfg.n_trajectories},
                  {"state_dim", cfg.state_dim},
                  {"min_len", cfg.min_len},
                  {"max_len", cfg.max_len},
                  {"mortality_target", cfg.mortality_target},
                  {"seed", cfg.seed},
                  {"out", out},
                  {"negatives", negatives}};
    write_run_json(out, resolved);
    std::cout << "wrote " << cohort.size() << " trajectories (" << negatives << " negative) to "
              << out << "/trajectories.csv\n";
    return 0;
}

int cmd_train_mc(CLI::App* sub, CommonDataFlags& common, MCTrainConfig<float>& cfg) {
    auto file_cfg = common.file_cfg();
    common.apply(sub, file_cfg);
    cfg_apply(sub, file_cfg, "lr", cfg.learning_rate);
    cfg_apply(sub, file_cfg, "weight-decay", cfg.weight_decay);
    cfg_apply(sub, file_cfg, "dropout", cfg.dropout);
    cfg_apply(sub, file_cfg, "batch", cfg.batch_size);
    cfg_apply(sub, file_cfg, "iterations", cfg.max_iterations);
    cfg.seed = common.seed;

    auto split = load_split(common.data, common.test_fraction, common.seed);
    std::vector<std::vector<float>> train_states, test_states;
    std::vector<int> train_labels, test_labels;
    states_and_labels(split.train, train_states, train_labels);
    states_and_labels(split.test, test_states, test_labels);

    auto mc = mc_train(train_states, train_labels, cfg);
    auto acc = mc_evaluate(mc, test_states, test_labels);

    fs::create_directories(common.out);
    save_mortality_classifier(mc, (fs::path(common.out) / "mc").string());

    json resolved = common.to_json();
    resolved["subcommand"] = "train-mc";
    resolved["lr"] = cfg.learning_rate;
    resolved["weight_decay"] = cfg.weight_decay;
    resolved["dropout"] = cfg.dropout;
    resolved["batch"] = cfg.batch_size;
    resolved["iterations"] = cfg.max_iterations;
    resolved["test_accuracy_pct"] = 100.0 * acc.accuracy;
    write_run_json(common.out, resolved);
    std::cout << "classifier test accuracy " << 100.0 * acc.accuracy << "% ; checkpoint at "
              << common.out << "/mc\n";
    return 0;
}

int cmd_train(CLI::App* sub, CommonDataFlags& common, DMFlags& dm, std::string& model_kind) {
    auto file_cfg = common.file_cfg();
    common.apply(sub, file_cfg);
    dm.apply(sub, file_cfg);
    cfg_apply(sub, file_cfg, "model", model_kind);
    ModelKind kind = parse_model_kind(model_kind);
    dm.train.seed = common.seed;

    auto split = load_split(common.data, common.test_fraction, common.seed);

    TrainResult<float> result;
    if (kind == ModelKind::posnegdm) {
        if (dm.mc_prefix.empty())
            throw std::invalid_argument("train --model posnegdm requires --mc <checkpoint prefix>");
        auto mc = load_frozen_mc(dm.mc_prefix);
        result = train_posnegdm(split, mc, dm.model, dm.train);
    } else {
        result = train_baseline<float>(kind, split, dm.model, dm.train);
    }

    fs::create_directories(common.out);
    save_dualsight(result.model, (fs::path(common.out) / "dm").string());
    save_training_log_csv(result.log, (fs::path(common.out) / "training_log.csv").string());

    json resolved = common.to_json();
    resolved["subcommand"] = "train";
    resolved["model"] = model_kind;
    resolved.update(dm.to_json());
    write_run_json(common.out, resolved);
    std::cout << "trained " << model_kind << " for " << dm.train.iterations
              << " iterations; final loss " << (result.log.empty() ? 0.0 : result.log.back().l_total)
              << " ; checkpoint at " << common.out << "/dm\n";
    return 0;
}

int cmd_evaluate(CLI::App* sub, CommonDataFlags& common, std::string& model_prefix,
                 std::string& mc_prefix, bool& no_mortality) {
    auto file_cfg = common.file_cfg();
    common.apply(sub, file_cfg);
    cfg_apply(sub, file_cfg, "model", model_prefix);
    cfg_apply(sub, file_cfg, "mc", mc_prefix);
    cfg_apply(sub, file_cfg, "no-mortality", no_mortality);

    auto model = load_dualsight<float>(model_prefix);
    auto mc = load_frozen_mc(mc_prefix);
    auto split = load_split(common.data, common.test_fraction, common.seed);

    auto report = evaluate_model(model, mc, split.test, common.seed, !no_mortality);
    metrics_emit(report, common.out);

    json resolved = common.to_json();
    resolved["subcommand"] = "evaluate";
    resolved["model"] = model_prefix;
    resolved["mc"] = mc_prefix;
    resolved["no_mortality"] = no_mortality;
    write_run_json(common.out, resolved);
    std::cout << "action accuracy " << report.action_accuracy_positive_pct << "%";
    if (report.mortality_available)
        std::cout << " ; stepwise mortality " << report.mortality_step_by_step.total_pct
                  << "% ; rollout mortality " << report.mortality_complete_traj_pct << "%";
    std::cout << " ; metrics in " << common.out << "\n";
    return 0;
}

int cmd_ablate(CLI::App* sub, CommonDataFlags& common, DMFlags& dm, std::string& param_name,
               std::string& values_csv) {
    auto file_cfg = common.file_cfg();
    common.apply(sub, file_cfg);
    dm.apply(sub, file_cfg);
    cfg_apply(sub, file_cfg, "param", param_name);
    cfg_apply(sub, file_cfg, "values", values_csv);
    AblationParam param = parse_ablation_param(param_name);
    auto values = parse_double_list(values_csv);
    dm.train.seed = common.seed;

    if (dm.mc_prefix.empty())
        throw std::invalid_argument("ablate requires --mc <checkpoint prefix>");
    auto mc = load_frozen_mc(dm.mc_prefix);
    auto split = load_split(common.data, common.test_fraction, common.seed);

    auto rows = ablation_sweep(param, values, dm.train, dm.model, split, mc);
    fs::create_directories(common.out);
    write_ablation_csv(param, rows, (fs::path(common.out) / "ablation.csv").string());

    json resolved = common.to_json();
    resolved["subcommand"] = "ablate";
    resolved["param"] = param_name;
    resolved["values"] = values;
    resolved.update(dm.to_json());
    write_run_json(common.out, resolved);
    std::cout << "swept " << param_name << " over " << values.size() << " values; table in "
              << common.out << "/ablation.csv\n";
    return 0;
}

int cmd_seeds(CLI::App* sub, CommonDataFlags& common, DMFlags& dm, std::string& seeds_csv) {
    auto file_cfg = common.file_cfg();
    common.apply(sub, file_cfg);
    dm.apply(sub, file_cfg);
    cfg_apply(sub, file_cfg, "seeds", seeds_csv);
    auto seeds = parse_seed_list(seeds_csv);

    if (dm.mc_prefix.empty())
        throw std::invalid_argument("seeds requires --mc <checkpoint prefix>");
    auto mc = load_frozen_mc(dm.mc_prefix);
    auto split = load_split(common.data, common.test_fraction, common.seed);

    auto summary = seed_sensitivity(dm.train, dm.model, seeds, split, mc);
    fs::create_directories(common.out);
    write_seeds_csv(summary, (fs::path(common.out) / "seeds.csv").string());

    json resolved = common.to_json();
    resolved["subcommand"] = "seeds";
    resolved["seeds"] = seeds;
    resolved.update(dm.to_json());
    write_run_json(common.out, resolved);
    std::cout << "ran " << seeds.size() << " seeds; accuracy " << summary.mean.accuracy_pct
              << " +- " << summary.stddev.accuracy_pct << " ; table in " << common.out
              << "/seeds.csv\n";
    return 0;
}

int cmd_histogram(CLI::App* sub, CommonDataFlags& common, std::string& model_prefix) {
    auto file_cfg = common.file_cfg();
    common.apply(sub, file_cfg);
    cfg_apply(sub, file_cfg, "model", model_prefix);

    auto model = load_dualsight<float>(model_prefix);
    auto split = load_split(common.data, common.test_fraction, common.seed);
    auto hists = collect_action_histograms(model, split.test);

    fs::create_directories(common.out);
    for (const auto& [name, hist] : hists) {
        std::ostringstream csv;
        for (const auto& row : hist) {
            for (int c = 0; c < 5; ++c) csv << (c ? "," : "") << row[c];
            csv << "\n";
        }
        write_text_file((fs::path(common.out) / ("histogram_" + name + ".csv")).string(), csv.str());
    }

    json resolved = common.to_json();
    resolved["subcommand"] = "histogram";
    resolved["model"] = model_prefix;
    write_run_json(common.out, resolved);
    std::cout << "wrote " << hists.size() << " treatment histograms to " << common.out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"posnegdm: outcome-contrasted sequential treatment decision making"};
    app.require_subcommand(1);

    // generate-data
    auto* gen = app.add_subcommand("generate-data", "generate a synthetic patient cohort CSV");
    CohortConfig gen_cfg;
    std::string gen_out = "out", gen_config;
    gen->add_option("--n", gen_cfg.n_trajectories, "number of trajectories");
    gen->add_option("--state-dim", gen_cfg.state_dim, "state feature count");
    gen->add_option("--min-len", gen_cfg.min_len, "minimum trajectory length");
    gen->add_option("--max-len", gen_cfg.max_len, "maximum trajectory length");
    gen->add_option("--mortality", gen_cfg.mortality_target, "target mortality fraction");
    gen->add_option("--seed", gen_cfg.seed, "root seed");
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--config", gen_config, "flat key-value config file");

    // train-mc
    auto* tmc = app.add_subcommand("train-mc", "train the survival classifier");
    CommonDataFlags tmc_common;
    MCTrainConfig<float> tmc_cfg;
    tmc_common.attach(tmc);
    tmc->add_option("--lr", tmc_cfg.learning_rate, "learning rate");
    tmc->add_option("--weight-decay", tmc_cfg.weight_decay, "decoupled weight decay");
    tmc->add_option("--dropout", tmc_cfg.dropout, "dropout rate");
    tmc->add_option("--batch", tmc_cfg.batch_size, "batch size");
    tmc->add_option("--iterations", tmc_cfg.max_iterations, "max training iterations");

    // train
    auto* trn = app.add_subcommand("train", "train a decision maker");
    CommonDataFlags trn_common;
    DMFlags trn_dm;
    std::string trn_model = "posnegdm";
    trn_common.attach(trn);
    trn_dm.attach(trn);
    trn->add_option("--model", trn_model, "posnegdm|dt|bc")->required();

    // evaluate
    auto* evl = app.add_subcommand("evaluate", "evaluate a trained decision maker");
    CommonDataFlags evl_common;
    std::string evl_model, evl_mc;
    bool evl_no_mortality = false;
    evl_common.attach(evl);
    evl->add_option("--model", evl_model, "decision-maker checkpoint prefix")->required();
    evl->add_option("--mc", evl_mc, "classifier checkpoint prefix")->required();
    evl->add_flag("--no-mortality", evl_no_mortality,
                  "report mortality as unavailable (state head not trained)");

    // ablate
    auto* abl = app.add_subcommand("ablate", "sweep one loss weight and tabulate metrics");
    CommonDataFlags abl_common;
    DMFlags abl_dm;
    std::string abl_param = "gamma", abl_values = "0.0,0.1,0.3,0.5,0.8,1.0";
    abl_common.attach(abl);
    abl_dm.attach(abl);
    abl->add_option("--param", abl_param, "alpha|beta|gamma");
    abl->add_option("--values", abl_values, "comma-separated weight values");

    // seeds
    auto* sds = app.add_subcommand("seeds", "train across seeds and tabulate mean/std");
    CommonDataFlags sds_common;
    DMFlags sds_dm;
    std::string sds_seeds = "1,2,3,4,5";
    sds_common.attach(sds);
    sds_dm.attach(sds);
    sds->add_option("--seeds", sds_seeds, "comma-separated seed list");

    // histogram
    auto* hst = app.add_subcommand("histogram", "emit 5x5 treatment histograms for the test set");
    CommonDataFlags hst_common;
    std::string hst_model;
    hst_common.attach(hst);
    hst->add_option("--model", hst_model, "decision-maker checkpoint prefix")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_generate_data(gen, gen_cfg, gen_out, gen_config);
        if (tmc->parsed()) return cmd_train_mc(tmc, tmc_common, tmc_cfg);
        if (trn->parsed()) return cmd_train(trn, trn_common, trn_dm, trn_model);
        if (evl->parsed()) return cmd_evaluate(evl, evl_common, evl_model, evl_mc, evl_no_mortality);
        if (abl->parsed()) return cmd_ablate(abl, abl_common, abl_dm, abl_param, abl_values);
        if (sds->parsed()) return cmd_seeds(sds, sds_common, sds_dm, sds_seeds);
        if (hst->parsed()) return cmd_histogram(hst, hst_common, hst_model);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

#include "stan/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "stan/errors.hpp"

namespace stan {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& allowed,
                    const std::string& section) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError("unknown key \"" + it.key() + "\" in " + section);
}

template <typename T>
void read_into(const json& j, const char* key, T& field,
               const std::string& section) {
    if (!j.contains(key)) return;
    try {
        field = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("bad value for \"" + std::string(key) + "\" in " +
                          section + ": " + e.what());
    }
}

void merge_model(const json& j, StanConfig& cfg) {
    reject_unknown(j,
                   {"M", "H", "n", "T", "spatial_dim", "temporal_dim", "kernel",
                    "use_spatial", "use_temporal"},
                   "model");
    read_into(j, "M", cfg.M, "model");
    read_into(j, "H", cfg.H, "model");
    read_into(j, "n", cfg.n, "model");
    read_into(j, "T", cfg.T, "model");
    read_into(j, "spatial_dim", cfg.spatial_dim, "model");
    read_into(j, "temporal_dim", cfg.temporal_dim, "model");
    read_into(j, "kernel", cfg.kernel, "model");
    read_into(j, "use_spatial", cfg.use_spatial, "model");
    read_into(j, "use_temporal", cfg.use_temporal, "model");
}

void merge_critic(const json& j, DiscriminatorConfig& dc) {
    reject_unknown(j,
                   {"spatial_kernel", "temporal_kernel", "spatial_filters",
                    "temporal_filters", "spatial_pool", "temporal_pool",
                    "feature_dim", "fc_units", "dropout", "sum_fusion"},
                   "critic");
    read_into(j, "spatial_kernel", dc.spatial_kernel, "critic");
    read_into(j, "temporal_kernel", dc.temporal_kernel, "critic");
    read_into(j, "spatial_filters", dc.spatial_filters, "critic");
    read_into(j, "temporal_filters", dc.temporal_filters, "critic");
    read_into(j, "spatial_pool", dc.spatial_pool, "critic");
    read_into(j, "temporal_pool", dc.temporal_pool, "critic");
    read_into(j, "feature_dim", dc.feature_dim, "critic");
    read_into(j, "fc_units", dc.fc_units, "critic");
    read_into(j, "dropout", dc.dropout_p, "critic");
    read_into(j, "sum_fusion", dc.sum_fusion, "critic");
}

void merge_train(const json& j, TrainConfig& tc) {
    reject_unknown(j,
                   {"pretrain_epochs", "pretrain_lr", "disc_epochs", "disc_lr",
                    "batch_size", "lambda_gp", "drift_eps"},
                   "train");
    read_into(j, "pretrain_epochs", tc.pretrain_epochs, "train");
    read_into(j, "pretrain_lr", tc.pretrain_lr, "train");
    read_into(j, "disc_epochs", tc.disc_epochs, "train");
    read_into(j, "disc_lr", tc.disc_lr, "train");
    read_into(j, "batch_size", tc.batch_size, "train");
    read_into(j, "lambda_gp", tc.lambda_gp, "train");
    read_into(j, "drift_eps", tc.drift_eps, "train");
}

void merge_monitor(const json& j, MonitorConfig& mc) {
    reject_unknown(j,
                   {"stride", "window_len", "ma_span", "threshold",
                    "refractory", "span"},
                   "monitor");
    read_into(j, "stride", mc.stride, "monitor");
    read_into(j, "window_len", mc.window_len, "monitor");
    read_into(j, "ma_span", mc.ma_span, "monitor");
    read_into(j, "threshold", mc.threshold, "monitor");
    read_into(j, "refractory", mc.refractory, "monitor");
    read_into(j, "span", mc.span, "monitor");
}

void merge_labels(const json& j, LabelConfig& lc) {
    reject_unknown(j, {"horizon", "margin"}, "labels");
    read_into(j, "horizon", lc.horizon, "labels");
    read_into(j, "margin", lc.margin, "labels");
}

void merge_synth(const json& j, SyntheticSpec& s, const std::string& section) {
    reject_unknown(j,
                   {"n", "duration", "sample_rate", "onsets", "strength",
                    "preictal_len", "noise", "seed", "subject_id", "name"},
                   section);
    read_into(j, "n", s.n, section);
    read_into(j, "duration", s.duration, section);
    read_into(j, "sample_rate", s.sample_rate, section);
    read_into(j, "onsets", s.onsets, section);
    read_into(j, "strength", s.strength, section);
    read_into(j, "preictal_len", s.preictal_len, section);
    read_into(j, "noise", s.noise, section);
    read_into(j, "seed", s.seed, section);
    read_into(j, "subject_id", s.subject_id, section);
    read_into(j, "name", s.name, section);
}

json model_json(const StanConfig& c) {
    return {{"M", c.M},
            {"H", c.H},
            {"n", c.n},
            {"T", c.T},
            {"spatial_dim", c.spatial_dim},
            {"temporal_dim", c.temporal_dim},
            {"kernel", c.kernel},
            {"use_spatial", c.use_spatial},
            {"use_temporal", c.use_temporal}};
}

json critic_json(const DiscriminatorConfig& d) {
    return {{"spatial_kernel", d.spatial_kernel},
            {"temporal_kernel", d.temporal_kernel},
            {"spatial_filters", d.spatial_filters},
            {"temporal_filters", d.temporal_filters},
            {"spatial_pool", d.spatial_pool},
            {"temporal_pool", d.temporal_pool},
            {"feature_dim", d.feature_dim},
            {"fc_units", d.fc_units},
            {"dropout", d.dropout_p},
            {"sum_fusion", d.sum_fusion}};
}

json train_json(const TrainConfig& t) {
    return {{"pretrain_epochs", t.pretrain_epochs},
            {"pretrain_lr", t.pretrain_lr},
            {"disc_epochs", t.disc_epochs},
            {"disc_lr", t.disc_lr},
            {"batch_size", t.batch_size},
            {"lambda_gp", t.lambda_gp},
            {"drift_eps", t.drift_eps}};
}

json monitor_json(const MonitorConfig& m) {
    return {{"stride", m.stride},       {"window_len", m.window_len},
            {"ma_span", m.ma_span},     {"threshold", m.threshold},
            {"refractory", m.refractory}, {"span", m.span}};
}

json labels_json(const LabelConfig& l) {
    return {{"horizon", l.horizon}, {"margin", l.margin}};
}

json synth_json(const SyntheticSpec& s) {
    return {{"n", s.n},
            {"duration", s.duration},
            {"sample_rate", s.sample_rate},
            {"onsets", s.onsets},
            {"strength", s.strength},
            {"preictal_len", s.preictal_len},
            {"noise", s.noise},
            {"seed", s.seed},
            {"subject_id", s.subject_id},
            {"name", s.name}};
}

}  // namespace

void RunConfig::validate() const {
    model.validate();
    critic.validate();
    train.validate();
    monitor.validate();
    if (labels.horizon <= 0.0)
        throw ConfigError("labels.horizon must be positive");
    if (labels.margin < 0.0)
        throw ConfigError("labels.margin must not be negative");
}

void merge_config_text(RunConfig& rc, const std::string& text,
                       const std::string& origin) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError("cannot parse " + origin + ": " + e.what());
    }
    if (!j.is_object()) throw ConfigError(origin + " is not a JSON object");
    reject_unknown(j,
                   {"model", "critic", "train", "monitor", "labels", "synth",
                    "corpus", "seed", "normalize", "same_subject_only",
                    "objective", "data_dir"},
                   origin);
    if (j.contains("model")) merge_model(j["model"], rc.model);
    if (j.contains("critic")) merge_critic(j["critic"], rc.critic);
    if (j.contains("train")) merge_train(j["train"], rc.train);
    if (j.contains("monitor")) merge_monitor(j["monitor"], rc.monitor);
    if (j.contains("labels")) merge_labels(j["labels"], rc.labels);
    if (j.contains("synth")) merge_synth(j["synth"], rc.synth, "synth");
    if (j.contains("corpus")) {
        const json& arr = j["corpus"];
        if (!arr.is_array()) throw ConfigError("corpus must be an array");
        rc.corpus.clear();
        for (std::size_t i = 0; i < arr.size(); ++i) {
            SyntheticSpec entry = rc.synth;  // per-recording overrides
            merge_synth(arr[i], entry, "corpus[" + std::to_string(i) + "]");
            rc.corpus.push_back(std::move(entry));
        }
    }
    read_into(j, "seed", rc.seed, origin);
    read_into(j, "normalize", rc.normalize, origin);
    read_into(j, "same_subject_only", rc.same_subject_only, origin);
    read_into(j, "data_dir", rc.data_dir, origin);
    if (j.contains("objective")) {
        std::string name;
        read_into(j, "objective", name, origin);
        rc.objective = parse_objective(name);
    }
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::ostringstream text;
    text << in.rdbuf();
    RunConfig rc;
    merge_config_text(rc, text.str(), path);
    return rc;
}

std::string serialize_run_config(const RunConfig& rc) {
    json j;
    j["model"] = model_json(rc.model);
    j["critic"] = critic_json(rc.critic);
    j["train"] = train_json(rc.train);
    j["monitor"] = monitor_json(rc.monitor);
    j["labels"] = labels_json(rc.labels);
    j["synth"] = synth_json(rc.synth);
    if (!rc.corpus.empty()) {
        json arr = json::array();
        for (const SyntheticSpec& s : rc.corpus) arr.push_back(synth_json(s));
        j["corpus"] = arr;
    }
    j["seed"] = rc.seed;
    j["normalize"] = rc.normalize;
    j["same_subject_only"] = rc.same_subject_only;
    j["objective"] = objective_name(rc.objective);
    j["data_dir"] = rc.data_dir;
    return j.dump(2) + "\n";
}

void save_run_config(const std::string& path, const RunConfig& rc) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << serialize_run_config(rc);
    if (!out) throw DataError("failed while writing " + path);
}

DiscObjective parse_objective(const std::string& name) {
    if (name == "wgan-gp") return DiscObjective::wgan_gp;
    if (name == "bce") return DiscObjective::bce;
    throw ConfigError("unknown objective \"" + name +
                      "\" (expected wgan-gp or bce)");
}

std::string objective_name(DiscObjective obj) {
    return obj == DiscObjective::wgan_gp ? "wgan-gp" : "bce";
}

EvalOptions eval_options(const RunConfig& rc) {
    EvalOptions opt;
    opt.model = rc.model;
    opt.disc = rc.critic;
    opt.train = rc.train;
    opt.train.seed = rc.seed;
    opt.monitor = rc.monitor;
    opt.labels = rc.labels;
    opt.objective = rc.objective;
    opt.same_subject_only = rc.same_subject_only;
    opt.normalize = rc.normalize;
    return opt;
}

}  // namespace stan

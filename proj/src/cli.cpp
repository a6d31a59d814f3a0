#include "stan/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "stan/config.hpp"
#include "stan/edf.hpp"
#include "stan/errors.hpp"
#include "stan/monitor.hpp"
#include "stan/training.hpp"

namespace fs = std::filesystem;

namespace stan {

namespace {

struct Flags {
    std::string config_path;
    std::string out;
    std::string data;
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool no_normalize = false;
    bool same_subject_only = false;
};

// defaults -> config file -> command-line flags
RunConfig resolve(const Flags& fl) {
    RunConfig rc;
    if (!fl.config_path.empty()) rc = load_run_config(fl.config_path);
    if (fl.seed_set) rc.seed = fl.seed;
    if (fl.no_normalize) rc.normalize = false;
    if (fl.same_subject_only) rc.same_subject_only = true;
    if (!fl.data.empty()) rc.data_dir = fl.data;
    rc.validate();
    return rc;
}

std::string require_out(const Flags& fl) {
    if (fl.out.empty())
        throw ConfigError("this subcommand needs --out");
    fs::create_directories(fl.out);
    return fl.out;
}

std::string require_data(const RunConfig& rc) {
    if (rc.data_dir.empty())
        throw ConfigError(
            "no dataset root: pass --data or set STAN_DATA_DIR");
    return rc.data_dir;
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    std::ostringstream text;
    text << in.rdbuf();
    return text.str();
}

std::vector<LabeledWindow> corpus_windows(const std::vector<Recording>& recs,
                                          const RunConfig& rc) {
    std::vector<LabeledWindow> windows;
    for (const Recording& rec : recs) {
        auto w = make_windows(rec, rc.model.T, rc.labels);
        windows.insert(windows.end(), w.begin(), w.end());
    }
    if (windows.empty())
        throw DataError("no labeled windows in the dataset; check the "
                        "horizon/margin settings against the recordings");
    return windows;
}

void write_loss_csv(const std::string& path,
                    const std::vector<double>& losses) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");
    out << "epoch,loss\n";
    char line[64];
    for (std::size_t i = 0; i < losses.size(); ++i) {
        std::snprintf(line, sizeof(line), "%zu,%.17g\n", i, losses[i]);
        out << line;
    }
}

int cmd_synth(const RunConfig& rc_in, const Flags& fl) {
    RunConfig rc = rc_in;
    std::string out = require_out(fl);
    if (rc.corpus.empty()) rc.corpus.push_back(rc.synth);
    // Resolve each recording's generation seed as run seed + its offset and
    // write the sum back, so the saved config re-runs bit-identically with
    // the top-level seed folded in.
    for (SyntheticSpec& spec : rc.corpus) spec.seed += rc.seed;
    rc.seed = 0;
    std::size_t onsets = 0;
    for (const SyntheticSpec& spec : rc.corpus) {
        Recording rec = generate_synthetic(spec);
        std::string path =
            out + "/" + rec.subject_id + "_" + rec.name + ".edf";
        write_edf(path, rec);
        onsets += rec.onsets.size();
        std::cout << path << ": " << rec.n_channels() << " ch, "
                  << rec.duration() << " s, " << rec.onsets.size()
                  << " seizure(s)\n";
    }
    save_run_config(out + "/run_config.json", rc);
    std::cout << "wrote " << rc.corpus.size() << " recording(s), " << onsets
              << " onset(s) under " << out << "\n";
    return 0;
}

int cmd_convert(const RunConfig& rc, const std::string& summary_path) {
    std::string data = require_data(rc);
    auto entries = parse_chbmit_summary(read_text(summary_path));
    std::size_t sidecars = 0, onsets = 0;
    for (const ChbmitEntry& e : entries) {
        if (e.onsets.empty()) continue;
        std::string sidecar = sidecar_path(data + "/" + e.file);
        write_onset_sidecar(sidecar, e.onsets);
        ++sidecars;
        onsets += e.onsets.size();
        std::cout << e.file << ": " << e.onsets.size() << " onset(s) -> "
                  << sidecar << "\n";
    }
    std::cout << "converted " << entries.size() << " summary entries, wrote "
              << sidecars << " sidecar(s), " << onsets << " onset(s)\n";
    return 0;
}

struct TrainedPipeline {
    Checkpoint ck;
    PretrainResult pre;
};

// The full training lifecycle over one window pool; mirrors the per-fold
// procedure of the evaluation harness, seeded by the run seed alone.
TrainedPipeline train_pipeline(const RunConfig& rc,
                               const std::vector<Recording>& recs,
                               const std::string& out_dir, bool adversarial) {
    TrainConfig tc = rc.train;
    tc.seed = rc.seed;
    std::vector<LabeledWindow> balanced =
        make_training_set(corpus_windows(recs, rc), rc.seed);
    NormStats norm;
    if (rc.normalize) {
        norm = compute_norm(balanced);
        apply_norm(balanced, norm);
    }

    TrainedPipeline tp;
    nd::Rng init = nd::Rng(rc.seed).fork("init");
    StanParams backbone = make_stan_params(rc.model, init);
    tp.pre = pretrain(backbone, rc.model, balanced, tc, out_dir,
                      rc.normalize ? &norm : nullptr);
    write_loss_csv(out_dir + "/pretrain_loss.csv", tp.pre.epoch_loss);

    tp.ck.model_cfg = rc.model;
    tp.ck.disc_cfg = rc.critic;
    if (rc.normalize) {
        tp.ck.has_norm = true;
        tp.ck.norm_mean = norm.mean;
        tp.ck.norm_std = norm.std_dev;
    }
    if (adversarial) {
        freeze(backbone);
        nd::Rng disc_init = nd::Rng(rc.seed).fork("critic");
        DiscParams disc = make_disc_params(rc.critic, rc.model, disc_init);
        train_discriminator(backbone, rc.model, disc, rc.critic, balanced, tc,
                            out_dir + "/disc_loss.csv", rc.objective);
        tp.ck.has_disc = true;
        tp.ck.disc = std::move(disc);
    }
    tp.ck.backbone = std::move(backbone);
    return tp;
}

int cmd_pretrain(const RunConfig& rc, const Flags& fl) {
    std::string out = require_out(fl);
    auto recs = load_edf_dir(require_data(rc));
    TrainedPipeline tp = train_pipeline(rc, recs, out, false);
    save_run_config(out + "/run_config.json", rc);
    std::cout << "pretrained " << rc.train.pretrain_epochs << " epoch(s); best "
              << tp.pre.best_loss << " at epoch " << tp.pre.best_epoch
              << "\nbest:  " << tp.pre.best_path
              << "\nlast:  " << tp.pre.last_path << "\n";
    return 0;
}

int cmd_train(const RunConfig& rc, const Flags& fl) {
    std::string out = require_out(fl);
    auto recs = load_edf_dir(require_data(rc));
    TrainedPipeline tp = train_pipeline(rc, recs, out, true);
    std::string model_path = out + "/model.ckpt";
    save_checkpoint(model_path, tp.ck);
    save_run_config(out + "/run_config.json", rc);
    std::cout << "backbone checksum " << params_checksum(tp.ck.backbone)
              << ", critic checksum " << params_checksum(tp.ck.disc)
              << "\nmodel: " << model_path << "\n";
    return 0;
}

int cmd_monitor(const RunConfig& rc, const Flags& fl,
                const std::string& model_path, double onset, bool onset_set,
                double start) {
    std::string out = require_out(fl);
    std::string data = require_data(rc);
    Checkpoint ck = load_checkpoint(model_path);
    if (!ck.has_disc)
        throw ConfigError("checkpoint " + model_path +
                          " has no critic; monitoring needs a `train` run");
    Recording rec = fs::is_directory(data)
                        ? load_edf_dir(data).at(0)
                        : load_edf(data);

    double at = onset;
    if (!onset_set) {
        if (!rec.onsets.empty()) at = rec.onsets.front();
    }
    RiskTrajectory traj;
    if (onset_set || !rec.onsets.empty()) {
        traj = monitor_preonset(rec, at, ck, rc.monitor);
        std::cout << "monitoring [" << at - rc.monitor.span << ", " << at
                  << "] s before the onset at " << at << " s\n";
    } else {
        traj = monitor_span(rec, start, ck, rc.monitor);
        std::cout << "monitoring [" << start << ", "
                  << start + rc.monitor.span << "] s\n";
    }
    write_trajectory_csv(out + "/trajectory.csv", traj);
    write_alarm_csv(out + "/alarms.csv", traj.alarms);
    save_run_config(out + "/run_config.json", rc);
    std::cout << traj.raw.size() << " score(s), " << traj.alarms.size()
              << " alarm(s)";
    if (!traj.alarms.empty())
        std::cout << "; earliest at " << traj.alarms.front().time << " s";
    std::cout << "\n";
    return 0;
}

int cmd_evaluate(const RunConfig& rc, const Flags& fl) {
    std::string out = require_out(fl);
    auto recs = load_edf_dir(require_data(rc));
    LosoResult res = run_loso(recs, eval_options(rc));
    std::string table = format_report(res);
    std::cout << table;
    write_report_csv(out + "/report.csv", res);
    std::ofstream txt(out + "/report.txt", std::ios::binary);
    txt << table;
    save_run_config(out + "/run_config.json", rc);
    return 0;
}

int cmd_ablate(const RunConfig& rc, const Flags& fl,
               std::vector<std::string> names) {
    std::string out = require_out(fl);
    auto recs = load_edf_dir(require_data(rc));
    if (names.empty()) names = kAblationConfigs;
    auto rows = run_ablation(names, recs, eval_options(rc));
    std::string table = format_ablation(rows);
    std::cout << table;
    write_ablation_csv(out + "/ablation.csv", rows);
    save_run_config(out + "/run_config.json", rc);
    return 0;
}

int cmd_bench(const RunConfig& rc, const Flags& fl, int iterations) {
    EfficiencyReport rep =
        efficiency_report(rc.model, rc.critic, iterations);
    std::string text = format_efficiency(rep);
    std::cout << text;
    if (!fl.out.empty()) {
        std::string out = require_out(fl);
        std::ofstream f(out + "/efficiency.txt", std::ios::binary);
        f << text;
        save_run_config(out + "/run_config.json", rc);
    }
    return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
    CLI::App app{"adversarial spatio-temporal EEG seizure forecasting"};
    app.name("stan");
    app.require_subcommand(1);
    app.fallthrough();

    Flags fl;
    app.add_option("--config", fl.config_path, "JSON config file");
    CLI::Option* seed_opt =
        app.add_option("--seed", fl.seed, "run seed (overrides the config)");
    app.add_option("--out", fl.out, "output directory");
    app.add_option("--data", fl.data, "dataset root")
        ->envname("STAN_DATA_DIR");
    app.add_flag("--no-normalize", fl.no_normalize,
                 "skip per-channel z-scoring");

    CLI::App* synth = app.add_subcommand(
        "synth", "generate a synthetic EEG corpus with seizure annotations");
    synth->add_option("--spec", fl.config_path,
                      "config file holding the synth/corpus sections");

    CLI::App* convert = app.add_subcommand(
        "convert-chbmit", "turn a CHB-MIT summary into onset sidecars");
    std::string summary_path;
    convert->add_option("--summary", summary_path, "chbXX-summary.txt file")
        ->required();

    app.add_subcommand("pretrain",
                       "reconstruction pretraining of the backbone");
    app.add_subcommand("train", "full pipeline: pretrain, freeze, critic");

    CLI::App* monitor =
        app.add_subcommand("monitor", "score a recording and emit trajectory "
                                      "and alarm CSVs");
    std::string model_path;
    double onset = 0.0, start = 0.0;
    monitor->add_option("--model", model_path, "checkpoint from `train`")
        ->required();
    CLI::Option* onset_opt =
        monitor->add_option("--onset", onset, "seizure onset, seconds");
    monitor->add_option("--start", start,
                        "span start for onset-free monitoring, seconds");

    CLI::App* evaluate = app.add_subcommand(
        "evaluate", "leave-one-seizure-out evaluation report");
    bool same_subject = false;
    evaluate->add_flag("--same-subject-only", same_subject,
                       "train each fold on the test subject alone");

    CLI::App* ablate =
        app.add_subcommand("ablate", "run the ablation configuration matrix");
    std::vector<std::string> ablate_names;
    ablate->add_option("--configs", ablate_names,
                       "subset of configurations to run")
        ->delimiter(',');

    CLI::App* bench =
        app.add_subcommand("bench", "parameter, latency, and memory report");
    int iterations = 100;
    bench->add_option("--iterations", iterations, "scoring calls to time");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        fl.seed_set = seed_opt->count() > 0;
        fl.same_subject_only = same_subject;
        RunConfig rc = resolve(fl);
        if (app.got_subcommand(synth)) return cmd_synth(rc, fl);
        if (app.got_subcommand(convert)) return cmd_convert(rc, summary_path);
        if (app.got_subcommand("pretrain")) return cmd_pretrain(rc, fl);
        if (app.got_subcommand("train")) return cmd_train(rc, fl);
        if (app.got_subcommand(monitor))
            return cmd_monitor(rc, fl, model_path, onset,
                               onset_opt->count() > 0, start);
        if (app.got_subcommand(evaluate)) return cmd_evaluate(rc, fl);
        if (app.got_subcommand(ablate)) return cmd_ablate(rc, fl, ablate_names);
        if (app.got_subcommand(bench)) return cmd_bench(rc, fl, iterations);
        throw ContractError("no subcommand dispatched");
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
    } catch (const UnsupportedFormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
    } catch (const InputTooShortError& e) {
        std::cerr << "data error: " << e.what() << "\n";
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
    } catch (const ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
    } catch (const ContractError& e) {
        std::cerr << "contract error: " << e.what() << "\n";
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
    }
    return 1;
}

int dispatch(int argc, const char* const* argv) {
    std::vector<std::string> args;
    args.reserve(static_cast<std::size_t>(argc > 0 ? argc - 1 : 0));
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return dispatch(args);
}

}  // namespace stan

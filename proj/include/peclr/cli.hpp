#pragma once

#include <cstdlib>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "peclr/config.hpp"
#include "peclr/csvio.hpp"
#include "peclr/encoder.hpp"
#include "peclr/pose.hpp"
#include "peclr/synthhand.hpp"
#include "peclr/trainer.hpp"

namespace peclr::cli {

namespace fs = std::filesystem;

// Exit codes are a stable contract: 0 ok, 2 usage, 3 I/O, 4 numeric failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitIo = 3;
inline constexpr int kExitNumeric = 4;

inline std::size_t env_threads() {
    const char* v = std::getenv("PECLR_THREADS");
    if (!v) return 1;
    long n = std::strtol(v, nullptr, 10);
    return n < 1 ? 1 : std::size_t(n);
}

inline fs::path resolve_out(const std::string& out) {
    fs::path p(out);
    const char* base = std::getenv("PECLR_OUT_DIR");
    if (base && p.is_relative()) return fs::path(base) / p;
    return p;
}

// Refuses to reuse an output directory that already holds a manifest unless
// --force is given.
inline fs::path prepare_out(const std::string& out, bool force) {
    fs::path dir = resolve_out(out);
    if (fs::exists(dir / "manifest.txt") && !force)
        throw IoError("output directory " + dir.string() +
                      " already contains a run (use --force to overwrite)");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string());
    return dir;
}

inline void write_manifest(const fs::path& dir, const std::string& command,
                           const std::vector<std::pair<std::string, std::string>>& extra,
                           const ExperimentConfig* cfg) {
    std::ostringstream os;
    os << "command = " << command << "\n";
    for (const auto& [k, v] : extra) os << k << " = " << v << "\n";
    if (cfg) {
        os << "# resolved configuration\n";
        os << experiment_config_to_text(*cfg);
    }
    write_text_file(dir / "manifest.txt", os.str());
}

inline Model load_pose_model(const fs::path& ckpt_path) {
    Checkpoint ckpt = load_checkpoint(ckpt_path);
    if (ckpt.config.head != HeadType::Pose)
        throw std::invalid_argument("checkpoint " + ckpt_path.string() + " is not pose-headed");
    return Model(ckpt.config, ckpt.params);
}

inline KeypointPredictor predictor_for(Model& model) {
    return [&model](const Tensor& image) {
        std::size_t S = model.config().input_side;
        Tensor input({1, 3, S, S});
        image_to_input(image, input, 0);
        auto outs = model.forward(input);
        const Tensor& pose = outs.at("pose");
        Pose25D p = Pose25D::from_flat(std::span<const double>(pose.data(), pose.dim(1)));
        return p.j2d;
    };
}

// ---- subcommand bodies ----

inline int cmd_gen_data(std::size_t n, std::uint64_t seed, double fraction, std::size_t side,
                        const std::string& out, bool force) {
    fs::path dir = prepare_out(out, force);
    DatasetConfig cfg{n, seed, fraction, side};
    fs::path manifest = make_dataset(dir, cfg);
    std::printf("%s\n", manifest.string().c_str());
    return kExitOk;
}

inline int cmd_pretrain(const std::string& config_path, const std::string& objective_flag,
                        const std::string& out, bool force) {
    ExperimentConfig cfg = load_experiment_config(config_path);
    if (objective_flag == "simclr")
        cfg.objective = Objective::SimCLR;
    else if (objective_flag == "peclr")
        cfg.objective = Objective::PeCLR;
    else if (!objective_flag.empty())
        throw std::invalid_argument("objective must be simclr or peclr, got " + objective_flag);
    for (const auto& p : cfg.dataset_paths)
        if (!fs::exists(p / "manifest.txt"))
            throw IoError("dataset path does not exist: " + p.string());

    fs::path dir = prepare_out(out, force);
    write_manifest(dir, "pretrain",
                   {{"objective", objective_name(cfg.objective)},
                    {"seed", std::to_string(cfg.root_seed)}},
                   &cfg);

    PretrainResult res = pretrain(cfg.pretrain_config());
    save_checkpoint(res.checkpoint, dir / "checkpoint.pkc");
    CsvWriter trace(dir / "trace.csv", {"step", "epoch", "lr", "loss"});
    for (const auto& r : res.trace)
        trace.row({std::to_string(r.step), std::to_string(r.epoch), csv_num(r.lr), csv_num(r.loss)});
    std::printf("checkpoint: %s\n", (dir / "checkpoint.pkc").string().c_str());
    std::printf("final loss: %s\n", csv_num(res.trace.empty() ? 0.0 : res.trace.back().loss).c_str());
    return kExitOk;
}

inline int cmd_finetune(const std::string& config_path, const std::string& init,
                        double label_fraction, const std::string& out, bool force) {
    if (!(label_fraction > 0.0) || label_fraction > 1.0)
        throw std::invalid_argument("label fraction must lie in (0,1]");
    ExperimentConfig cfg = load_experiment_config(config_path);
    for (const auto& p : cfg.dataset_paths)
        if (!fs::exists(p / "manifest.txt"))
            throw IoError("dataset path does not exist: " + p.string());
    std::optional<Checkpoint> ckpt;
    if (init != "none") {
        if (!fs::exists(init)) throw IoError("checkpoint does not exist: " + init);
        ckpt = load_checkpoint(init);
    }

    fs::path dir = prepare_out(out, force);
    write_manifest(dir, "finetune",
                   {{"init", init},
                    {"label_fraction", csv_num(label_fraction)},
                    {"seed", std::to_string(cfg.root_seed)}},
                   &cfg);

    FinetuneResult res = finetune(cfg.finetune_config(label_fraction), ckpt);
    save_checkpoint(res.checkpoint, dir / "checkpoint.pkc");
    CsvWriter trace(dir / "metrics.csv",
                    {"epoch", "lr", "train_loss", "val_epe_3d_cm", "val_pa_epe_cm", "val_auc",
                     "val_epe_2d_px", "val_root_recovery_failures"});
    for (const auto& r : res.trace)
        trace.row({std::to_string(r.epoch), csv_num(r.lr), csv_num(r.train_loss), csv_num(r.val.epe),
                   csv_num(r.val.pa_epe), csv_num(r.val.auc), csv_num(r.val.epe_2d),
                   std::to_string(r.val.root_recovery_failures)});
    std::printf("checkpoint: %s\n", (dir / "checkpoint.pkc").string().c_str());
    if (!res.trace.empty())
        std::printf("final val 3D EPE: %s cm, 2D EPE: %s px\n", csv_num(res.trace.back().val.epe).c_str(),
                    csv_num(res.trace.back().val.epe_2d).c_str());
    return kExitOk;
}

inline int cmd_eval(const std::string& model_path, const std::string& dataset, bool aligned,
                    const std::string& out, bool force) {
    if (!fs::exists(model_path)) throw IoError("model checkpoint does not exist: " + model_path);
    if (!fs::exists(fs::path(dataset) / "manifest.txt"))
        throw IoError("dataset path does not exist: " + dataset);
    Model model = load_pose_model(model_path);
    Dataset ds = load_dataset(dataset);
    std::vector<std::size_t> all(ds.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    MetricReport r = detail::evaluate_model(model, ds, all, aligned);

    fs::path dir = prepare_out(out, force);
    write_manifest(dir, "eval",
                   {{"model", model_path}, {"dataset", dataset}, {"aligned", aligned ? "true" : "false"}},
                   nullptr);
    nlohmann::ordered_json j;
    j["epe_3d_cm"] = r.epe;
    j["pa_epe_cm"] = r.pa_epe;
    j["auc"] = r.auc;
    j["epe_2d_px"] = r.epe_2d;
    j["aligned"] = r.aligned;
    j["samples"] = r.samples;
    j["root_recovery_failures"] = r.root_recovery_failures;
    write_text_file(dir / "report.json", j.dump(2) + "\n");
    CsvWriter pck(dir / "pck.csv", {"threshold_cm", "pck"});
    for (std::size_t k = 0; k < kPckThresholds; ++k)
        pck.row({csv_num(pck_threshold(k)), csv_num(r.pck[k])});
    std::printf("%s\n", (dir / "report.json").string().c_str());
    return kExitOk;
}

inline int cmd_equiv_report(const std::string& model_a, const std::string& model_b,
                            const std::string& dataset, const std::string& grid_kind,
                            std::size_t rotation_points, std::size_t translation_points,
                            const std::string& out, bool force) {
    for (const auto& p : {model_a, model_b})
        if (!fs::exists(p)) throw IoError("model checkpoint does not exist: " + p);
    if (!fs::exists(fs::path(dataset) / "manifest.txt"))
        throw IoError("dataset path does not exist: " + dataset);
    if (grid_kind != "rotation" && grid_kind != "translation")
        throw std::invalid_argument("--grid must be rotation or translation");

    Dataset ds = load_dataset(dataset);
    if (ds.size() == 0) throw std::invalid_argument("equiv-report: dataset is empty");
    std::vector<Tensor> images;
    images.reserve(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) images.push_back(ds.image_tensor(i));

    std::vector<AffineTransform2D> grid =
        grid_kind == "rotation" ? rotation_grid(double(ds.image_side), rotation_points)
                                : translation_grid(double(ds.image_side), translation_points);

    Model base_a = load_pose_model(model_a);
    Model base_b = load_pose_model(model_b);

    // grid points are independent; per-thread model copies keep results
    // bitwise identical for any thread count
    std::size_t n_threads = std::min(env_threads(), grid.size());
    std::vector<EquivGridPoint> points(grid.size());
    auto work = [&](std::size_t tid) {
        Model ma = base_a;
        Model mb = base_b;
        KeypointPredictor fa = predictor_for(ma);
        KeypointPredictor fb = predictor_for(mb);
        for (std::size_t gi = tid; gi < grid.size(); gi += n_threads) {
            auto res = equivariance_improvement(fa, fb, images,
                                                std::span<const AffineTransform2D>(&grid[gi], 1));
            points[gi] = res[0];
        }
    };
    if (n_threads <= 1) {
        work(0);
    } else {
        std::vector<std::thread> threads;
        for (std::size_t t = 0; t < n_threads; ++t) threads.emplace_back(work, t);
        for (auto& t : threads) t.join();
    }

    fs::path dir = prepare_out(out, force);
    write_manifest(dir, "equiv-report",
                   {{"model_a", model_a}, {"model_b", model_b}, {"dataset", dataset}, {"grid", grid_kind}},
                   nullptr);
    CsvWriter csv(dir / "equiv.csv",
                  {"grid_index", "rotation_deg", "translation_x", "translation_y", "equiv_a", "equiv_b",
                   "improvement", "counted", "skipped"});
    double mean_improv = 0;
    std::size_t counted_points = 0;
    for (std::size_t gi = 0; gi < points.size(); ++gi) {
        const EquivGridPoint& p = points[gi];
        csv.row({std::to_string(gi), csv_num(p.transform.rotation_deg), csv_num(p.transform.translation.x),
                 csv_num(p.transform.translation.y), csv_num(p.mean_equiv_a), csv_num(p.mean_equiv_b),
                 csv_num(p.mean_improv), std::to_string(p.counted), std::to_string(p.skipped)});
        if (p.counted) {
            mean_improv += p.mean_improv;
            ++counted_points;
        }
    }
    std::printf("mean improvement over grid: %s\n",
                csv_num(counted_points ? mean_improv / double(counted_points) : 0.0).c_str());
    return kExitOk;
}

inline int cmd_ablate(const std::string& candidates_csv, const std::string& config_path,
                      const std::string& out, bool force) {
    std::vector<std::string> candidates;
    std::istringstream ss(candidates_csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = detail::trim(item);
        if (!item.empty()) candidates.push_back(item);
    }
    if (candidates.empty() || candidates.size() > 5)
        throw std::invalid_argument("--candidates needs 1..5 comma-separated names");
    ExperimentConfig cfg = load_experiment_config(config_path);
    for (const auto& p : cfg.dataset_paths)
        if (!fs::exists(p / "manifest.txt"))
            throw IoError("dataset path does not exist: " + p.string());

    fs::path dir = prepare_out(out, force);
    write_manifest(dir, "ablate-compositions",
                   {{"candidates", candidates_csv}, {"seed", std::to_string(cfg.root_seed)}}, &cfg);
    auto ranking = composition_search(candidates, cfg.pretrain_config(), cfg.probe_config());
    CsvWriter csv(dir / "ranking.csv", {"rank", "composition", "probe_epe3d_cm", "probe_epe2d_px"});
    for (std::size_t i = 0; i < ranking.size(); ++i)
        csv.row({std::to_string(i + 1), ranking[i].key, csv_num(ranking[i].probe_epe3d),
                 csv_num(ranking[i].probe_epe2d)});
    std::printf("%s\n", (dir / "ranking.csv").string().c_str());
    return kExitOk;
}

// ---- entry point ----

inline int run(int argc, const char* const* argv) {
    CLI::App app{"PeCLR: equivariant contrastive pretraining for 2.5D hand pose, on synthetic data"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
    std::size_t gen_n = 0, gen_side = 64;
    std::uint64_t gen_seed = 1;
    double gen_fraction = 1.0;
    std::string gen_out;
    bool gen_force = false;
    gen->add_option("--n", gen_n, "number of samples")->required();
    gen->add_option("--seed", gen_seed, "generation seed");
    gen->add_option("--labeled-fraction", gen_fraction, "fraction of samples marked labeled");
    gen->add_option("--image-side", gen_side, "square image side in px");
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_flag("--force", gen_force, "overwrite an existing run");

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "self-supervised contrastive pretraining");
    std::string pre_config, pre_objective, pre_out;
    bool pre_force = false;
    pre->add_option("--config", pre_config, "experiment config file")->required();
    pre->add_option("--objective", pre_objective, "simclr|peclr (overrides config)");
    pre->add_option("--out", pre_out, "output directory")->required();
    pre->add_flag("--force", pre_force, "overwrite an existing run");

    // finetune
    auto* fin = app.add_subcommand("finetune", "supervised 2.5D fine-tuning");
    std::string fin_config, fin_init = "none", fin_out;
    double fin_fraction = 1.0;
    bool fin_force = false;
    fin->add_option("--config", fin_config, "experiment config file")->required();
    fin->add_option("--init", fin_init, "none or a pretraining checkpoint path");
    fin->add_option("--label-fraction", fin_fraction, "fraction of labeled data to use, in (0,1]");
    fin->add_option("--out", fin_out, "output directory")->required();
    fin->add_flag("--force", fin_force, "overwrite an existing run");

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate a pose model on a dataset");
    std::string ev_model, ev_dataset, ev_out;
    bool ev_aligned = false, ev_force = false;
    ev->add_option("--model", ev_model, "pose checkpoint")->required();
    ev->add_option("--dataset", ev_dataset, "dataset directory")->required();
    ev->add_flag("--aligned", ev_aligned, "procrustes-align before PCK/AUC");
    ev->add_option("--out", ev_out, "output directory")->required();
    ev->add_flag("--force", ev_force, "overwrite an existing run");

    // equiv-report
    auto* eq = app.add_subcommand("equiv-report", "equivariance deviation grids for two models");
    std::string eq_a, eq_b, eq_dataset, eq_grid = "rotation", eq_out;
    std::size_t eq_rot_points = 17, eq_trans_points = 5;
    bool eq_force = false;
    eq->add_option("--model-a", eq_a, "reference pose checkpoint (denominator)")->required();
    eq->add_option("--model-b", eq_b, "comparison pose checkpoint")->required();
    eq->add_option("--dataset", eq_dataset, "dataset directory")->required();
    eq->add_option("--grid", eq_grid, "rotation|translation");
    eq->add_option("--rotation-points", eq_rot_points, "rotation grid size");
    eq->add_option("--translation-points", eq_trans_points, "translation grid size per axis");
    eq->add_option("--out", eq_out, "output directory")->required();
    eq->add_flag("--force", eq_force, "overwrite an existing run");

    // ablate-compositions
    auto* ab = app.add_subcommand("ablate-compositions", "exhaustive augmentation composition search");
    std::string ab_candidates, ab_config, ab_out;
    bool ab_force = false;
    ab->add_option("--candidates", ab_candidates, "comma-separated transform names (max 5)")->required();
    ab->add_option("--config", ab_config, "experiment config file")->required();
    ab->add_option("--out", ab_out, "output directory")->required();
    ab->add_flag("--force", ab_force, "overwrite an existing run");

    try {
        app.parse(argc, argv);
        if (*gen) return cmd_gen_data(gen_n, gen_seed, gen_fraction, gen_side, gen_out, gen_force);
        if (*pre) return cmd_pretrain(pre_config, pre_objective, pre_out, pre_force);
        if (*fin) return cmd_finetune(fin_config, fin_init, fin_fraction, fin_out, fin_force);
        if (*ev) return cmd_eval(ev_model, ev_dataset, ev_aligned, ev_out, ev_force);
        if (*eq)
            return cmd_equiv_report(eq_a, eq_b, eq_dataset, eq_grid, eq_rot_points, eq_trans_points,
                                    eq_out, eq_force);
        if (*ab) return cmd_ablate(ab_candidates, ab_config, ab_out, ab_force);
        return kExitUsage;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    } catch (const IoError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitIo;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitIo;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumeric;
    }
}

}  // namespace peclr::cli

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "peclr/cli.hpp"

using namespace peclr;
namespace fs = std::filesystem;

namespace {

int run(std::initializer_list<std::string> args) {
    std::vector<std::string> argv_s{"peclr"};
    argv_s.insert(argv_s.end(), args);
    std::vector<const char*> argv;
    for (const auto& s : argv_s) argv.push_back(s.c_str());
    return cli::run(int(argv.size()), argv.data());
}

fs::path fresh_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("peclr_cli_" + tag);
    fs::remove_all(p);
    return p;
}

fs::path write_config(const std::string& tag, const std::string& dataset,
                      const std::string& extra = "") {
    fs::path p = fs::temp_directory_path() / ("peclr_cli_cfg_" + tag + ".cfg");
    std::string text =
        "[dataset]\n"
        "path = " + dataset + "\n"
        "[model]\n"
        "input_side = 16\n"
        "channels = 4 8\n"
        "feature_dim = 16\n"
        "latent_points = 4\n"
        "[schedule]\n"
        "batch = 6\n"
        "epochs = 1\n"
        "warmup_epochs = 0\n"
        "[finetune]\n"
        "batch = 6\n"
        "epochs = 1\n"
        "[probe]\n"
        "epochs = 2\n"
        "batch = 8\n"
        "[seeds]\n"
        "root = 5\n" + extra;
    write_text_file(p, text);
    return p;
}

const std::string& shared_dataset() {
    static std::string path = [] {
        fs::path p = fresh_dir("data");
        make_dataset(p, {12, 4, 1.0, 16});
        return p.string();
    }();
    return path;
}

}  // namespace

TEST_CASE("gen-data wraps the generator and prints the manifest") {
    fs::path out = fresh_dir("gen");
    CHECK(run({"gen-data", "--n", "6", "--seed", "2", "--labeled-fraction", "0.5", "--image-side",
               "16", "--out", out.string()}) == 0);
    CHECK(fs::exists(out / "manifest.txt"));
    Dataset ds = load_dataset(out);
    CHECK(ds.size() == 6);
    for (std::size_t i = 0; i < 6; ++i) CHECK(ds.samples[i].labeled == (i < 3));
}

TEST_CASE("gen-data exit codes: invalid args 2, refusal without --force 3") {
    fs::path out = fresh_dir("gen_codes");
    CHECK(run({"gen-data", "--n", "4", "--labeled-fraction", "1.5", "--out", out.string()}) == 2);
    CHECK(run({"gen-data", "--out", out.string()}) == 2);  // missing required --n
    fs::remove_all(out);
    CHECK(run({"gen-data", "--n", "4", "--image-side", "16", "--out", out.string()}) == 0);
    CHECK(run({"gen-data", "--n", "4", "--image-side", "16", "--out", out.string()}) == 3);
    CHECK(run({"gen-data", "--n", "4", "--image-side", "16", "--out", out.string(), "--force"}) == 0);
}

TEST_CASE("pretrain records the objective and reruns byte-identically") {
    fs::path cfg = write_config("pre", shared_dataset());
    fs::path out_s = fresh_dir("pre_simclr");
    fs::path out_p = fresh_dir("pre_peclr");
    fs::path out_p2 = fresh_dir("pre_peclr2");
    REQUIRE(run({"pretrain", "--config", cfg.string(), "--objective", "simclr", "--out",
                 out_s.string()}) == 0);
    REQUIRE(run({"pretrain", "--config", cfg.string(), "--objective", "peclr", "--out",
                 out_p.string()}) == 0);
    REQUIRE(run({"pretrain", "--config", cfg.string(), "--objective", "peclr", "--out",
                 out_p2.string()}) == 0);

    std::string ms = read_text_file(out_s / "manifest.txt");
    std::string mp = read_text_file(out_p / "manifest.txt");
    CHECK(ms.find("objective = simclr") != std::string::npos);
    CHECK(mp.find("objective = peclr") != std::string::npos);
    CHECK(ms != mp);
    CHECK(read_text_file(out_p / "trace.csv") == read_text_file(out_p2 / "trace.csv"));
    CHECK(read_text_file(out_p / "checkpoint.pkc") == read_text_file(out_p2 / "checkpoint.pkc"));
    CHECK(read_text_file(out_s / "trace.csv") != read_text_file(out_p / "trace.csv"));
}

TEST_CASE("pretrain exits 3 when the dataset path is missing, naming it") {
    fs::path cfg = write_config("pre_missing", (fs::temp_directory_path() / "no_such_dataset").string());
    fs::path out = fresh_dir("pre_missing_out");
    CHECK(run({"pretrain", "--config", cfg.string(), "--out", out.string()}) == 3);
    CHECK(run({"pretrain", "--config", cfg.string(), "--objective", "bogus", "--out",
               out.string()}) == 2);
}

TEST_CASE("finetune label fraction contract") {
    fs::path cfg = write_config("fin", shared_dataset());
    fs::path out1 = fresh_dir("fin_full");
    fs::path out2 = fresh_dir("fin_tenth");
    CHECK(run({"finetune", "--config", cfg.string(), "--init", "none", "--label-fraction", "1.0",
               "--out", out1.string()}) == 0);
    CHECK(run({"finetune", "--config", cfg.string(), "--init", "none", "--label-fraction", "0.1",
               "--out", out2.string()}) == 0);
    CHECK(run({"finetune", "--config", cfg.string(), "--init", "none", "--label-fraction", "1.5",
               "--out", fresh_dir("fin_bad").string()}) == 2);
    CHECK(fs::exists(out1 / "metrics.csv"));
    CHECK(fs::exists(out1 / "checkpoint.pkc"));
    std::string manifest = read_text_file(out2 / "manifest.txt");
    CHECK(manifest.find("label_fraction = 0.1") != std::string::npos);
}

TEST_CASE("finetune initialized from a pretraining checkpoint") {
    fs::path cfg = write_config("fin_init", shared_dataset());
    fs::path pre_out = fresh_dir("fin_init_pre");
    REQUIRE(run({"pretrain", "--config", cfg.string(), "--out", pre_out.string()}) == 0);
    fs::path out = fresh_dir("fin_init_out");
    CHECK(run({"finetune", "--config", cfg.string(), "--init",
               (pre_out / "checkpoint.pkc").string(), "--label-fraction", "1.0", "--out",
               out.string()}) == 0);
    CHECK(run({"finetune", "--config", cfg.string(), "--init", "missing.pkc", "--label-fraction",
               "1.0", "--out", fresh_dir("fin_init_bad").string()}) == 3);
}

TEST_CASE("eval emits a report and identical inputs give identical bytes") {
    fs::path cfg = write_config("eval", shared_dataset());
    fs::path fin = fresh_dir("eval_model");
    REQUIRE(run({"finetune", "--config", cfg.string(), "--init", "none", "--label-fraction", "1.0",
                 "--out", fin.string()}) == 0);
    std::string model = (fin / "checkpoint.pkc").string();
    fs::path out1 = fresh_dir("eval_1");
    fs::path out2 = fresh_dir("eval_2");
    CHECK(run({"eval", "--model", model, "--dataset", shared_dataset(), "--out", out1.string()}) == 0);
    CHECK(run({"eval", "--model", model, "--dataset", shared_dataset(), "--aligned", "--out",
               out2.string()}) == 0);
    CHECK(fs::exists(out1 / "report.json"));
    CHECK(fs::exists(out1 / "pck.csv"));

    fs::path out3 = fresh_dir("eval_3");
    CHECK(run({"eval", "--model", model, "--dataset", shared_dataset(), "--out", out3.string()}) == 0);
    CHECK(read_text_file(out1 / "report.json") == read_text_file(out3 / "report.json"));

    // pck.csv has a header plus one row per threshold
    std::string pck = read_text_file(out1 / "pck.csv");
    CHECK(std::count(pck.begin(), pck.end(), '\n') == 101);
}

TEST_CASE("eval exit codes: empty dataset 2, missing files 3, wrong head 2") {
    fs::path cfg = write_config("eval_codes", shared_dataset());
    fs::path fin = fresh_dir("eval_codes_model");
    REQUIRE(run({"finetune", "--config", cfg.string(), "--init", "none", "--label-fraction", "1.0",
                 "--out", fin.string()}) == 0);
    std::string model = (fin / "checkpoint.pkc").string();

    fs::path empty = fresh_dir("eval_empty_data");
    make_dataset(empty, {0, 1, 1.0, 16});
    CHECK(run({"eval", "--model", model, "--dataset", empty.string(), "--out",
               fresh_dir("eval_e1").string()}) == 2);
    CHECK(run({"eval", "--model", "nope.pkc", "--dataset", shared_dataset(), "--out",
               fresh_dir("eval_e2").string()}) == 3);
    CHECK(run({"eval", "--model", model, "--dataset",
               (fs::temp_directory_path() / "definitely_missing").string(), "--out",
               fresh_dir("eval_e3").string()}) == 3);

    fs::path pre = fresh_dir("eval_proj_ckpt");
    REQUIRE(run({"pretrain", "--config", cfg.string(), "--out", pre.string()}) == 0);
    CHECK(run({"eval", "--model", (pre / "checkpoint.pkc").string(), "--dataset", shared_dataset(),
               "--out", fresh_dir("eval_e4").string()}) == 2);
}

TEST_CASE("equiv-report on identical models is all-zero improvement with one row per grid point") {
    fs::path cfg = write_config("equiv", shared_dataset());
    fs::path fin = fresh_dir("equiv_model");
    REQUIRE(run({"finetune", "--config", cfg.string(), "--init", "none", "--label-fraction", "1.0",
                 "--out", fin.string()}) == 0);
    std::string model = (fin / "checkpoint.pkc").string();
    fs::path out = fresh_dir("equiv_out");
    CHECK(run({"equiv-report", "--model-a", model, "--model-b", model, "--dataset", shared_dataset(),
               "--grid", "rotation", "--rotation-points", "5", "--out", out.string()}) == 0);
    std::string csv = read_text_file(out / "equiv.csv");
    REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 6);  // header + 5 grid points
    std::istringstream ss(csv);
    std::string line;
    std::getline(ss, line);  // header
    int zero_rows = 0;
    while (std::getline(ss, line)) {
        std::vector<std::string> cells;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        REQUIRE(cells.size() == 9);
        double rot = std::stod(cells[1]);
        double equiv_a = std::stod(cells[4]);
        double improv = std::stod(cells[6]);
        CHECK(improv == 0.0);
        if (rot == 0.0) {
            CHECK(equiv_a == 0.0);  // identity grid point
            ++zero_rows;
        }
    }
    CHECK(zero_rows == 1);
}

TEST_CASE("equiv-report rejects unknown grids and mismatched heads") {
    fs::path cfg = write_config("equiv_bad", shared_dataset());
    fs::path fin = fresh_dir("equiv_bad_model");
    REQUIRE(run({"finetune", "--config", cfg.string(), "--init", "none", "--label-fraction", "1.0",
                 "--out", fin.string()}) == 0);
    std::string model = (fin / "checkpoint.pkc").string();
    CHECK(run({"equiv-report", "--model-a", model, "--model-b", model, "--dataset", shared_dataset(),
               "--grid", "shear", "--out", fresh_dir("equiv_b1").string()}) == 2);
    CHECK(run({"equiv-report", "--model-a", "gone.pkc", "--model-b", model, "--dataset",
               shared_dataset(), "--grid", "rotation", "--out",
               fresh_dir("equiv_b2").string()}) == 3);
}

TEST_CASE("ablate-compositions emits a ranking and rejects oversized candidate sets") {
    fs::path cfg = write_config("ablate", shared_dataset());
    fs::path out = fresh_dir("ablate_out");
    CHECK(run({"ablate-compositions", "--candidates", "rotation", "--config", cfg.string(), "--out",
               out.string()}) == 0);
    std::string csv = read_text_file(out / "ranking.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);  // header + 1 subset
    CHECK(csv.find("rotation") != std::string::npos);
    CHECK(run({"ablate-compositions", "--candidates", "a,b,c,d,e,f", "--config", cfg.string(),
               "--out", fresh_dir("ablate_bad").string()}) == 2);
}

TEST_CASE("config files with unknown keys are hard errors") {
    fs::path cfg = write_config("badkey", shared_dataset(), "[schedule]\nbogus_key = 1\n");
    CHECK(run({"pretrain", "--config", cfg.string(), "--out", fresh_dir("badkey_out").string()}) == 3);
    fs::path cfg2 = write_config("badsec", shared_dataset(), "[nonsense]\nx = 1\n");
    CHECK(run({"pretrain", "--config", cfg2.string(), "--out", fresh_dir("badsec_out").string()}) == 3);
}

TEST_CASE("config round trip preserves every resolved value") {
    fs::path cfg_path = write_config("echo", shared_dataset(),
                                     "[objective]\nkind = simclr\ntemperature = 0.25\n"
                                     "[augment.pretrain]\nrotation = off\n");
    ExperimentConfig cfg = load_experiment_config(cfg_path);
    CHECK(cfg.objective == Objective::SimCLR);
    CHECK(cfg.temperature == 0.25);
    CHECK_FALSE(cfg.augment_pretrain.rotation);
    std::string echoed = experiment_config_to_text(cfg);
    ExperimentConfig back = parse_experiment_config(echoed);
    CHECK(experiment_config_to_text(back) == echoed);
}

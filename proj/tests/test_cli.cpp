#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

// End-to-end checks of the command-line surface: exit codes and artifact
// determinism, driving the real binary.

#ifndef MTPROMPT_CLI
#error "MTPROMPT_CLI must point at the built binary"
#endif

namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("mtp_cli_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

int run(const std::string& args) {
    const std::string cmd = std::string(MTPROMPT_CLI) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

} // namespace

TEST_CASE("cli: exit codes and artifact determinism") {
    TempDir tmp;
    const std::string root = tmp.path.string();

    // usage errors exit 2
    CHECK(run("gen") == 2);
    CHECK(run("nonsense") == 2);
    CHECK(run("gen --out " + root + "/x --classes 1") == 2);

    // generation succeeds and is bitwise repeatable
    CHECK(run("gen --out " + root + "/d1 --train 3 --val 2 --size 32x32 --classes 4 --seed 9") == 0);
    CHECK(run("gen --out " + root + "/d2 --train 3 --val 2 --size 32x32 --classes 4 --seed 9") == 0);
    for (int i = 0; i < 3; ++i) {
        const std::string name = "train/sample_0000" + std::to_string(i) + ".mtt";
        CHECK(slurp(tmp.path / "d1" / name) == slurp(tmp.path / "d2" / name));
    }

    // config validation happens before training
    std::ofstream bad(tmp.path / "bad.json");
    bad << R"({"encoder": {"prompt_start": 6, "prompt_end": 5, "prompt_count": 1}})";
    bad.close();
    CHECK(run("train --config " + root + "/bad.json --data " + root + "/d1") == 2);
    std::ofstream unk(tmp.path / "unk.json");
    unk << R"({"mystery": true})";
    unk.close();
    CHECK(run("train --config " + root + "/unk.json --data " + root + "/d1") == 2);

    // missing inputs exit 1
    CHECK(run("eval --model " + root + "/nope --data " + root + "/d1") == 1);
    CHECK(run("train --data " + root + "/no_such_dir") == 1);

    // tiny training run: seeded rerun reproduces checkpoint and history
    std::ofstream cfg(tmp.path / "tiny.json");
    cfg << R"({
      "classes": 4,
      "encoder": {"image_h": 32, "image_w": 32, "patch_size": 8, "dim": 16, "heads": 2,
                  "layers": 4, "prompt_start": 3, "prompt_end": 4, "prompt_count": 1,
                  "prompt_init": "random", "tap_layers": [1, 2, 3]},
      "decoder": {"dim": 16, "heads": 1, "qk_dim": 8, "mlp_ratio": 1.0},
      "train": {"iterations": 4, "batch_size": 2, "lr": 0.001, "seed": 3}
    })";
    cfg.close();
    CHECK(run("train --config " + root + "/tiny.json --data " + root + "/d1 --out " + root + "/r1") == 0);
    CHECK(run("train --config " + root + "/tiny.json --data " + root + "/d1 --out " + root + "/r2") == 0);
    CHECK(slurp(tmp.path / "r1/model.mtt") == slurp(tmp.path / "r2/model.mtt"));
    CHECK(slurp(tmp.path / "r1/history.csv") == slurp(tmp.path / "r2/history.csv"));
    CHECK(slurp(tmp.path / "r1/model.json") == slurp(tmp.path / "r2/model.json"));

    // evaluation + analysis artifacts exist
    CHECK(run("eval --model " + root + "/r1 --data " + root + "/d1 --out " + root + "/m.csv") == 0);
    CHECK(slurp(tmp.path / "m.csv").rfind("task,metric,value", 0) == 0);
    CHECK(run("analyze --mode corr --model " + root + "/r1 --data " + root + "/d1 --out " + root + "/an") == 0);
    CHECK(fs::exists(tmp.path / "an/correlation.csv"));
    CHECK(run("analyze --mode swap --model " + root + "/r1 --data " + root + "/d1 --out " + root + "/an") == 0);
    CHECK(fs::exists(tmp.path / "an/swap.csv"));
    CHECK(run("analyze --mode attn --model " + root + "/r1 --data " + root + "/d1 --out " + root +
              "/an --task depth") == 0);
    CHECK(fs::exists(tmp.path / "an/attn_maps.mtt"));
    CHECK(run("analyze --mode bogus --model " + root + "/r1 --data " + root + "/d1") == 2);

    // ablate: row count = settings x (seeds + 1 median)
    CHECK(run("ablate --config " + root + "/tiny.json --data " + root + "/d1 --axis counts --values 0,1 "
              "--seeds 2 --out " + root + "/grid.csv") == 0);
    const std::string grid = slurp(tmp.path / "grid.csv");
    CHECK(std::count(grid.begin(), grid.end(), '\n') == 7); // header + 6 rows
    CHECK(run("ablate --config " + root + "/tiny.json --data " + root + "/d1 --axis bogus --values 1 "
              "--out " + root + "/g2.csv") == 2);
}

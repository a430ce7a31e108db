#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mtprompt/data.hpp"
#include "support/oracles.hpp"

using namespace mtp;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("mtp_test_" + std::to_string(::getpid()) + "_" +
                                            std::to_string(reinterpret_cast<uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

} // namespace

TEST_CASE("mtt round trip is bit-exact across dtypes") {
    Rng rng(1);
    TempDir tmp;
    const std::string path = (tmp.path / "t.mtt").string();
    for (int trial = 0; trial < 50; ++trial) {
        MttFile f;
        auto tf = Tensor<float>::uniform({3, 5}, rng, -10, 10);
        auto td = Tensor<double>::uniform({2, 2, 2}, rng, -1, 1);
        Tensor<int32_t> ti = Tensor<int32_t>::zeros({7});
        for (int i = 0; i < 7; ++i) ti.at(i) = static_cast<int32_t>(rng.next_u64());
        Tensor<uint8_t> tb = Tensor<uint8_t>::zeros({4, 4});
        for (int i = 0; i < 16; ++i) tb.at(i) = static_cast<uint8_t>(rng.next_below(256));
        f.add("a_f32", tf);
        f.add("b_f64", td);
        f.add("c_i32", ti);
        f.add("d_u8", tb);
        f.write(path);
        MttFile r = MttFile::read(path);
        CHECK(r.names() == std::vector<std::string>{"a_f32", "b_f64", "c_i32", "d_u8"});
        CHECK(bitwise_equal(r.tensor<float>("a_f32"), tf));
        CHECK(bitwise_equal(r.tensor<double>("b_f64"), td));
        CHECK(bitwise_equal(r.tensor<int32_t>("c_i32"), ti));
        CHECK(bitwise_equal(r.tensor<uint8_t>("d_u8"), tb));
    }
}

TEST_CASE("mtt rejects bad input") {
    MttFile f;
    auto t = Tensor<float>::zeros({2});
    CHECK_THROWS_AS(f.add("", t), IoError);
    CHECK_THROWS_AS(f.add(std::string(300, 'x'), t), IoError);
    CHECK_THROWS_AS(f.add("non\tascii", t), IoError);

    // bad magic reports offset 0
    std::vector<unsigned char> bad = {'X', 'X', 'X', 'X', 0, 0, 0, 0};
    try {
        MttFile::parse(bad);
        CHECK(false);
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("offset 0") != std::string::npos);
    }

    // truncation reports the byte offset
    MttFile ok;
    ok.add("x", Tensor<float>::zeros({4}));
    TempDir tmp;
    const std::string path = (tmp.path / "trunc.mtt").string();
    ok.write(path);
    std::ifstream in(path, std::ios::binary);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    bytes.resize(bytes.size() - 7);
    CHECK_THROWS_AS(MttFile::parse(bytes), IoError);

    // unknown dtype code
    std::ifstream in2(path, std::ios::binary);
    std::vector<unsigned char> full((std::istreambuf_iterator<char>(in2)), std::istreambuf_iterator<char>());
    full[4 + 4 + 2 + 1] = 9; // dtype byte of the first entry
    CHECK_THROWS_AS(MttFile::parse(full), IoError);
}

TEST_CASE("gen_scene: empty scene, determinism, value ranges") {
    auto s = gen_scene(7, 32, 32, 5, 0);
    for (int i = 0; i < s.semseg.numel(); ++i) CHECK(s.semseg.at(i) == 0);
    for (int i = 0; i < s.edge.numel(); ++i) CHECK(s.edge.at(i) == 0);
    // plane normal is constant
    const float n0 = s.normal.at(5, 5, 0), n1 = s.normal.at(5, 5, 1), n2 = s.normal.at(5, 5, 2);
    for (int y = 1; y < 31; ++y)
        for (int x = 1; x < 31; ++x) {
            CHECK(s.normal.at(y, x, 0) == doctest::Approx(n0).epsilon(1e-6));
            CHECK(s.normal.at(y, x, 1) == doctest::Approx(n1).epsilon(1e-6));
            CHECK(s.normal.at(y, x, 2) == doctest::Approx(n2).epsilon(1e-6));
        }

    auto a = gen_scene(123, 64, 64, 5, 4);
    auto b = gen_scene(123, 64, 64, 5, 4);
    CHECK(bitwise_equal(a.image, b.image));
    CHECK(bitwise_equal(a.semseg, b.semseg));
    CHECK(bitwise_equal(a.depth, b.depth));
    CHECK(bitwise_equal(a.normal, b.normal));
    CHECK(bitwise_equal(a.edge, b.edge));

    auto c = gen_scene(124, 64, 64, 5, 4);
    CHECK_FALSE(bitwise_equal(a.image, c.image));

    for (int i = 0; i < a.depth.numel(); ++i) {
        CHECK(a.depth.at(i) >= 1.0f);
        CHECK(a.depth.at(i) <= 5.0f);
    }
    for (int i = 0; i < a.image.numel(); ++i) {
        CHECK(a.image.at(i) >= 0.0f);
        CHECK(a.image.at(i) <= 1.0f);
    }
    CHECK_THROWS_AS((void)gen_scene(1, 16, 16, 1, 2), ConfigError);
}

TEST_CASE("gen_scene: normals unit length and consistent with depth away from edges") {
    auto s = gen_scene(55, 64, 64, 5, 5);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            const double nx = s.normal.at(y, x, 0), ny = s.normal.at(y, x, 1), nz = s.normal.at(y, x, 2);
            CHECK(std::abs(std::sqrt(nx * nx + ny * ny + nz * nz) - 1.0) < 1e-5);
        }
    auto rederived = normals_from_depth(s.depth);
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x) {
            if (s.edge.at(y * 64 + x)) continue; // excluded band at discontinuities
            for (int c = 0; c < 3; ++c)
                CHECK(std::abs(rederived.at(y, x, c) - s.normal.at(y, x, c)) < 1e-5);
        }
}

TEST_CASE("gen_scene: edge map equals the brute-force label-disagreement oracle") {
    for (uint64_t seed : {1ull, 9ull, 77ull}) {
        auto s = gen_scene(seed, 48, 40, 5, 4);
        auto ref = oracle::edges(std::span<const int32_t>(s.semseg.ptr(), static_cast<size_t>(s.semseg.numel())),
                                 48, 40);
        for (int i = 0; i < s.edge.numel(); ++i) CHECK(s.edge.at(i) == ref[static_cast<size_t>(i)]);
    }
}

TEST_CASE("gen_scene: single centered square produces the boundary band") {
    // force a single-object scene via retries: use n_objects = 1
    auto s = gen_scene(42, 32, 32, 3, 1);
    auto ref = oracle::edges(std::span<const int32_t>(s.semseg.ptr(), static_cast<size_t>(s.semseg.numel())),
                             32, 32);
    int edge_pixels = 0;
    for (int i = 0; i < s.edge.numel(); ++i) {
        CHECK(s.edge.at(i) == ref[static_cast<size_t>(i)]);
        edge_pixels += s.edge.at(i);
    }
    CHECK(edge_pixels > 0);
}

TEST_CASE("dataset generation + loading round trip") {
    TempDir tmp;
    GenOptions opt;
    opt.root = (tmp.path / "ds").string();
    opt.train = 6;
    opt.val = 3;
    opt.height = 32;
    opt.width = 32;
    opt.seed = 5;
    generate_dataset(opt);

    auto train = load_dataset(opt.root, "train");
    auto val = load_dataset(opt.root, "val");
    CHECK(train.size() == 6);
    CHECK(val.size() == 3);
    CHECK(train.classes() == 5);

    // regenerating with the same seed gives a byte-identical tree
    GenOptions opt2 = opt;
    opt2.root = (tmp.path / "ds2").string();
    generate_dataset(opt2);
    for (const char* split : {"train", "val"}) {
        const int count = split == std::string("train") ? 6 : 3;
        for (int i = 0; i < count; ++i) {
            std::ifstream f1(fs::path(opt.root) / split / sample_filename(i), std::ios::binary);
            std::ifstream f2(fs::path(opt2.root) / split / sample_filename(i), std::ios::binary);
            std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
            std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
            CHECK(b1 == b2);
        }
    }

    SUBCASE("missing file fails before the first sample") {
        fs::remove(fs::path(opt.root) / "train" / sample_filename(3));
        CHECK_THROWS_AS((void)load_dataset(opt.root, "train"), IoError);
    }
    SUBCASE("corrupted sample names its index") {
        std::ofstream f(fs::path(opt.root) / "train" / sample_filename(2),
                        std::ios::binary | std::ios::trunc);
        f << "garbage";
        f.close();
        try {
            (void)load_dataset(opt.root, "train");
            CHECK(false);
        } catch (const IoError& e) {
            CHECK(std::string(e.what()).find("sample 2") != std::string::npos);
        }
    }
    SUBCASE("unknown split rejected") {
        CHECK_THROWS_AS((void)load_dataset(opt.root, "test"), IoError);
    }
}

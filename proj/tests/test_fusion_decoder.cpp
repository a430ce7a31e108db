#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mtprompt/grad_check.hpp"
#include "mtprompt/model.hpp"

using namespace mtp;

namespace {

ModelConfig tiny_model_cfg() {
    ModelConfig c;
    c.classes = 3;
    c.encoder.image_h = 16;
    c.encoder.image_w = 16;
    c.encoder.patch_size = 4;
    c.encoder.dim = 8;
    c.encoder.heads = 2;
    c.encoder.mlp_ratio = 2.0;
    c.encoder.layers = 4;
    c.encoder.prompt_start = 3;
    c.encoder.prompt_end = 4;
    c.encoder.prompt_count = 1;
    c.encoder.prompt_init = PromptInit::random;
    c.encoder.tap_layers = {1, 2, 3};
    c.decoder.dim = 8;
    c.decoder.heads = 2;
    c.decoder.qk_dim = 8;
    c.decoder.mlp_ratio = 1.0;
    c.validate();
    return c;
}

ModelConfig toy_cfg() {
    ModelConfig c; // library defaults are the toy configuration
    c.validate();
    return c;
}

template <typename T>
TaskFeatureSet<T> leaf_feature_set(int tasks, int scales, int h, int w, int d, Rng& rng, bool grad) {
    TaskFeatureSet<T> fs;
    fs.features.resize(static_cast<size_t>(tasks));
    for (int t = 0; t < tasks; ++t)
        for (int s = 0; s < scales; ++s)
            fs.features[static_cast<size_t>(t)].push_back(Tensor<T>::uniform({h, w, d}, rng, -1, 1, grad));
    return fs;
}

} // namespace

TEST_CASE("unfold_and_upsample scale resolutions on the toy grid") {
    ModelConfig c = toy_cfg();
    Rng rng(1);
    auto enc_w = init_encoder<float>(c.encoder, c.task_count(), rng);
    auto bank = init_prompt_bank<float>(c.encoder, c.task_count(), rng);
    auto fus = init_fusion<float>(c, rng);
    Tape<float> t;
    auto img = Tensor<float>::uniform({64, 64, 3}, rng, 0, 1);
    auto enc = encode_all(t, img, bank, enc_w, c.encoder, c.task_count());
    auto fs = unfold_and_upsample(t, enc, c.encoder, fus);
    REQUIRE(fs.scales() == 4);
    CHECK(fs.features[0][0].shape() == std::vector<int>{32, 32, 32});
    CHECK(fs.features[0][1].shape() == std::vector<int>{16, 16, 32});
    CHECK(fs.features[0][2].shape() == std::vector<int>{8, 8, 32});
    CHECK(fs.features[0][3].shape() == std::vector<int>{8, 8, 32});
    // taps below the prompt range are shared across tasks; the unfolded maps
    // must be the same node, not merely equal
    CHECK(fs.features[0][0].same_storage(fs.features[3][0]));
    CHECK(fs.features[0][1].same_storage(fs.features[2][1]));
    CHECK_FALSE(fs.features[0][3].same_storage(fs.features[1][3]));
}

TEST_CASE("fuse: fixed 1/T on identical features returns the feature") {
    Rng rng(2);
    ModelConfig c = tiny_model_cfg();
    auto fus = init_fusion<double>(c, rng);
    Tape<double> t;
    TaskFeatureSet<double> fs;
    fs.features.resize(4);
    for (int s = 0; s < 4; ++s) {
        auto f = Tensor<double>::uniform({4, 4, 8}, rng, -1, 1);
        for (int task = 0; task < 4; ++task) fs.features[static_cast<size_t>(task)].push_back(f);
    }
    auto fused = fuse(t, fs, c, fus);
    for (int s = 0; s < 4; ++s)
        for (int i = 0; i < fused[static_cast<size_t>(s)].numel(); ++i)
            CHECK(fused[static_cast<size_t>(s)].at(i) ==
                  doctest::Approx(fs.features[0][static_cast<size_t>(s)].at(i)).epsilon(1e-9));
}

TEST_CASE("fuse: one-hot row selects a single task exactly") {
    Rng rng(3);
    ModelConfig c = tiny_model_cfg();
    c.fusion.fixed_weights = {{1, 0, 0, 0}, {1, 0, 0, 0}, {1, 0, 0, 0}, {1, 0, 0, 0}};
    auto fus = init_fusion<double>(c, rng);
    Tape<double> t;
    auto fs = leaf_feature_set<double>(4, 4, 4, 4, 8, rng, false);
    auto fused = fuse(t, fs, c, fus);
    for (int s = 0; s < 4; ++s) CHECK(bitwise_equal(fused[static_cast<size_t>(s)], fs.features[0][static_cast<size_t>(s)]));
}

TEST_CASE("fuse: masked rows are not renormalized") {
    Rng rng(4);
    ModelConfig c = tiny_model_cfg();
    c.fusion.fixed_weights = {{0.25, 0.25, 0.0, 0.0},
                              {0.25, 0.25, 0.0, 0.0},
                              {0.25, 0.25, 0.0, 0.0},
                              {0.25, 0.25, 0.0, 0.0}};
    auto fus = init_fusion<double>(c, rng);
    Tape<double> t;
    TaskFeatureSet<double> fs;
    fs.features.resize(4);
    auto f = Tensor<double>::full({2, 2, 8}, 1.0);
    for (int task = 0; task < 4; ++task)
        for (int s = 0; s < 4; ++s) fs.features[static_cast<size_t>(task)].push_back(f);
    auto fused = fuse(t, fs, c, fus);
    for (int i = 0; i < fused[0].numel(); ++i) CHECK(fused[0].at(i) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("fuse: linearity in the features") {
    Rng rng(5);
    ModelConfig c = tiny_model_cfg();
    c.fusion.fixed_weights = {{0.7, -0.2, 0.1, 0.4},
                              {0.3, 0.3, 0.3, 0.1},
                              {1.0, 0.0, 0.5, 0.25},
                              {0.2, 0.2, 0.2, 0.2}};
    auto fus = init_fusion<double>(c, rng);
    Tape<double> t;
    auto fs = leaf_feature_set<double>(4, 4, 3, 3, 8, rng, false);
    auto fused = fuse(t, fs, c, fus);

    const double a = -2.75;
    TaskFeatureSet<double> fs2;
    fs2.features.resize(4);
    for (int task = 0; task < 4; ++task)
        for (int s = 0; s < 4; ++s) {
            auto scaled = fs.features[static_cast<size_t>(task)][static_cast<size_t>(s)].clone();
            for (auto& v : scaled.data()) v *= a;
            fs2.features[static_cast<size_t>(task)].push_back(scaled);
        }
    auto fused2 = fuse(t, fs2, c, fus);
    for (int s = 0; s < 4; ++s)
        for (int i = 0; i < fused[static_cast<size_t>(s)].numel(); ++i)
            CHECK(relative_error(fused2[static_cast<size_t>(s)].at(i), a * fused[static_cast<size_t>(s)].at(i)) < 1e-6);
}

TEST_CASE("fuse: zero weight row sends zero gradient to every task at that scale") {
    Rng rng(6);
    ModelConfig c = tiny_model_cfg();
    c.fusion.fixed_weights = {{0, 0, 0, 0}, {0.25, 0.25, 0.25, 0.25}, {0.25, 0.25, 0.25, 0.25},
                              {0.25, 0.25, 0.25, 0.25}};
    auto fus = init_fusion<double>(c, rng);
    Tape<double> t;
    auto fs = leaf_feature_set<double>(4, 4, 2, 2, 8, rng, true);
    auto fused = fuse(t, fs, c, fus);
    auto loss = mean_all(t, fused[0]);
    t.backward(loss);
    for (int task = 0; task < 4; ++task) {
        const auto& f = fs.features[static_cast<size_t>(task)][0];
        if (!f.grad_allocated()) continue;
        for (double g : f.grad_view()) CHECK(g == 0.0);
    }
}

TEST_CASE("fuse: mode none returns zeros off the tape") {
    Rng rng(7);
    ModelConfig c = tiny_model_cfg();
    c.fusion.mode = FusionMode::none;
    auto fus = init_fusion<double>(c, rng);
    Tape<double> t;
    auto fs = leaf_feature_set<double>(4, 4, 2, 2, 8, rng, true);
    auto fused = fuse(t, fs, c, fus);
    for (const auto& f : fused) {
        CHECK_FALSE(f.requires_grad());
        for (int i = 0; i < f.numel(); ++i) CHECK(f.at(i) == 0.0);
    }
}

TEST_CASE("fuse: learnable weights start at 1/T and receive gradient") {
    Rng rng(8);
    ModelConfig c = tiny_model_cfg();
    c.fusion.mode = FusionMode::learnable;
    auto fus = init_fusion<double>(c, rng);
    CHECK(fus.learn_w.at(0) == doctest::Approx(0.25));
    Tape<double> t;
    auto fs = leaf_feature_set<double>(4, 4, 2, 2, 8, rng, true);
    auto fused = fuse(t, fs, c, fus);
    t.backward(mean_all(t, fused[1]));
    bool nonzero = false;
    for (double g : fus.learn_w.grad_view())
        if (g != 0.0) nonzero = true;
    CHECK(nonzero);
}

TEST_CASE("cross-task attention fusion: symmetry, zero query, closed-form gate") {
    Rng rng(9);
    ModelConfig c = tiny_model_cfg();
    c.fusion.mode = FusionMode::cross_task_attention;
    auto fus = init_fusion<double>(c, rng);

    // identical task features -> uniform weights -> identity
    Tape<double> t;
    TaskFeatureSet<double> fs;
    fs.features.resize(4);
    for (int s = 0; s < 4; ++s) {
        auto f = Tensor<double>::uniform({2, 2, 8}, rng, -1, 1);
        for (int task = 0; task < 4; ++task) fs.features[static_cast<size_t>(task)].push_back(f);
    }
    auto fused = fuse(t, fs, c, fus);
    for (int i = 0; i < fused[0].numel(); ++i)
        CHECK(fused[0].at(i) == doctest::Approx(fs.features[0][0].at(i)).epsilon(1e-9));

    // zero query reduces exactly to fixed 1/T
    for (auto& q : fus.attn_q) q = Tensor<double>::zeros(q.shape(), true);
    auto fs2 = leaf_feature_set<double>(4, 4, 2, 2, 8, rng, false);
    auto fused_attn = fuse(t, fs2, c, fus);
    ModelConfig cf = tiny_model_cfg();
    auto fusf = init_fusion<double>(cf, rng);
    auto fused_fixed = fuse(t, fs2, cf, fusf);
    for (int s = 0; s < 4; ++s)
        for (int i = 0; i < fused_attn[static_cast<size_t>(s)].numel(); ++i)
            CHECK(fused_attn[static_cast<size_t>(s)].at(i) ==
                  doctest::Approx(fused_fixed[static_cast<size_t>(s)].at(i)).epsilon(1e-12));

    // two tasks with GAP logits [ln 2, 0] -> alpha = [2/3, 1/3]
    ModelConfig c2 = tiny_model_cfg();
    c2.tasks = {Task::semseg, Task::depth};
    c2.fusion.mode = FusionMode::cross_task_attention;
    c2.validate();
    auto fus2 = init_fusion<double>(c2, rng);
    for (auto& q : fus2.attn_q) {
        q = Tensor<double>::zeros(q.shape(), true);
        q.at(0) = 1.0; // picks channel 0 of the GAP
    }
    TaskFeatureSet<double> fs3;
    fs3.features.resize(2);
    for (int s = 0; s < 4; ++s) {
        auto f0 = Tensor<double>::zeros({2, 2, 8});
        auto f1 = Tensor<double>::zeros({2, 2, 8});
        for (int p = 0; p < 4; ++p) {
            f0.at(p * 8) = std::log(2.0); // channel 0 constant
            f1.at(p * 8) = 0.0;
        }
        fs3.features[0].push_back(f0);
        fs3.features[1].push_back(f1);
    }
    auto fused3 = fuse(t, fs3, c2, fus2);
    // channel 0: (2/3) ln2 + (1/3) 0
    CHECK(fused3[0].at(0) == doctest::Approx((2.0 / 3.0) * std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("up_block shape contract and single-task reduction") {
    Rng rng(10);
    DecoderConfig dc;
    dc.dim = 8;
    dc.heads = 2;
    dc.qk_dim = 8;
    dc.mlp_ratio = 1.0;
    dc.stages = 2;
    auto w = init_decoder<double>(dc, 4, rng);
    Tape<double> t;

    std::vector<Tensor<double>> feats;
    for (int task = 0; task < 4; ++task) feats.push_back(Tensor<double>::uniform({8, 8, 8}, rng, -1, 1));
    auto fused = Tensor<double>::uniform({8, 8, 8}, rng, -1, 1);
    auto out = up_block(t, feats, fused, w, 0, dc);
    REQUIRE(out.size() == 4);
    CHECK(out[0].shape() == std::vector<int>{16, 16, 8});

    // single task: the site mix vanishes, leaving deconv + residual MLP
    std::vector<Tensor<double>> one = {feats[0]};
    auto out1 = up_block(t, one, Tensor<double>(), w, 0, dc);
    const auto& sw = w.stages_for(0)[0];
    auto u = reshape(t, conv_transpose2d(t, feats[0], sw.up_w, sw.up_b, 2), {16 * 16, 8});
    auto hid = gelu(t, add_rowvec(t, matmul(t, layer_norm(t, u, sw.ln2_w, sw.ln2_b), sw.mlp1_w), sw.mlp1_b));
    auto ref = add(t, u, add_rowvec(t, matmul(t, hid, sw.mlp2_w), sw.mlp2_b));
    auto ref3 = reshape(t, ref, {16, 16, 8});
    CHECK(bitwise_equal(out1[0], ref3));
}

TEST_CASE("up_block: identical task features stay identical") {
    Rng rng(11);
    DecoderConfig dc;
    dc.dim = 8;
    dc.heads = 2;
    dc.qk_dim = 8;
    dc.mlp_ratio = 1.0;
    auto w = init_decoder<double>(dc, 3, rng);
    Tape<double> t;
    auto f = Tensor<double>::uniform({4, 4, 8}, rng, -1, 1);
    std::vector<Tensor<double>> feats = {f, f, f};
    auto out = up_block(t, feats, Tensor<double>(), w, 0, dc);
    for (int i = 0; i < out[0].numel(); ++i) {
        CHECK(out[0].at(i) == doctest::Approx(out[1].at(i)).epsilon(1e-9));
        CHECK(out[1].at(i) == doctest::Approx(out[2].at(i)).epsilon(1e-9));
    }
}

TEST_CASE("forward_sample: end-to-end shapes and determinism on the toy config") {
    ModelConfig c = toy_cfg();
    auto model = Model<float>::init(c, 42);
    Rng rng(12);
    auto img = Tensor<float>::uniform({64, 64, 3}, rng, 0, 1);

    Tape<float> t1;
    auto r1 = forward_sample(t1, model, img);
    REQUIRE(r1.predictions.size() == 4);
    CHECK(r1.predictions[0].shape() == std::vector<int>{64, 64, 5});
    CHECK(r1.predictions[1].shape() == std::vector<int>{64, 64, 1});
    CHECK(r1.predictions[2].shape() == std::vector<int>{64, 64, 3});
    CHECK(r1.predictions[3].shape() == std::vector<int>{64, 64, 1});

    Tape<float> t2;
    auto r2 = forward_sample(t2, model, img);
    for (size_t i = 0; i < r1.predictions.size(); ++i) CHECK(bitwise_equal(r1.predictions[i], r2.predictions[i]));
}

TEST_CASE("task_head: zero weights give zero logits, channel contracts hold") {
    ModelConfig c = tiny_model_cfg();
    auto heads = init_heads<double>(c);
    Tape<double> t;
    Rng rng(13);
    auto feat = Tensor<double>::uniform({4, 4, 8}, rng, -1, 1);
    for (int task = 0; task < 4; ++task) {
        auto out = task_head(t, feat, task, heads);
        CHECK(out.dim(0) == 4);
        CHECK(out.dim(2) == c.out_channels(c.tasks[static_cast<size_t>(task)]));
        for (int i = 0; i < out.numel(); ++i) CHECK(out.at(i) == 0.0);
    }
    CHECK_THROWS_AS((void)task_head(t, feat, 9, heads), ConfigError);
}

TEST_CASE("model save/load round trip and clone independence") {
    ModelConfig c = tiny_model_cfg();
    auto m = Model<float>::init(c, 7);
    CHECK(m.param_count() > 0);

    auto copy = m.clone();
    copy.params()[0].second.data()[0] += 1.0f;
    CHECK(m.params()[0].second.data()[0] != copy.params()[0].second.data()[0]);

    m.save("/tmp/mtp_test_model.mtt");
    auto loaded = Model<float>::load("/tmp/mtp_test_model.mtt", c);
    auto pa = m.params();
    auto pb = loaded.params();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].first == pb[i].first);
        CHECK(bitwise_equal(pa[i].second, pb[i].second));
    }
}

TEST_CASE("decode rejects inconsistent scale counts") {
    ModelConfig c = tiny_model_cfg();
    c.decoder.stages = 3; // needs 5 scales, taps give 4
    Rng rng(14);
    auto model = Model<float>::init(tiny_model_cfg(), 1);
    Tape<float> t;
    auto fs = leaf_feature_set<float>(4, 4, 4, 4, 8, rng, false);
    std::vector<Tensor<float>> fused;
    for (int s = 0; s < 4; ++s) fused.push_back(Tensor<float>::zeros({4, 4, 8}));
    CHECK_THROWS_AS((void)decode(t, fs, fused, model.decoder, c), ConfigError);
}

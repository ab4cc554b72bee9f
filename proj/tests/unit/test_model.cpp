#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "smmini/error.hpp"
#include "smmini/model.hpp"

namespace smmini {
namespace {

std::vector<TokenId> bytes(std::string_view s) {
    std::vector<TokenId> out{ByteVocab::bos};
    for (unsigned char c : s) out.push_back(c);
    return out;
}

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.d_model = 32;
    cfg.n_layers = 2;
    cfg.d_ff = 64;
    cfg.max_sequence_length = 48;
    cfg.lora_r = 4;
    return cfg;
}

TEST(ModelConfig, Validation) {
    ModelConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    cfg.d_model = 6;
    cfg.n_heads = 4;
    try {
        init_model(cfg, 1);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::config);
    }
    ModelConfig bad_dropout;
    bad_dropout.lora_dropout = 1.0;
    EXPECT_THROW(bad_dropout.validate(), Error);
    ModelConfig bad_r;
    bad_r.lora_r = 0;
    EXPECT_THROW(bad_r.validate(), Error);
}

TEST(LoraDelta, HandExample) {
    LoraAdapter ad{Matrix::identity(2), Matrix::identity(2), 4.0, 2, 0.0};
    const Matrix d = lora_delta(ad);
    EXPECT_EQ(d(0, 0), 2.0);
    EXPECT_EQ(d(1, 1), 2.0);
    EXPECT_EQ(d(0, 1), 0.0);
    ad.b = Matrix(2, 2);
    EXPECT_EQ(lora_delta(ad), Matrix(2, 2));
    ad.b = Matrix(2, 3);
    EXPECT_THROW(lora_delta(ad), Error);
}

TEST(LoraDelta, PublishedScale) {
    EXPECT_EQ(ModelConfig{}.lora_scale(), 0.25);
}

TEST(InitModel, DeterministicAndZeroDelta) {
    const auto cfg = small_config();
    const Parameters a = init_model(cfg, 11);
    const Parameters b = init_model(cfg, 11);
    EXPECT_TRUE(a == b);
    EXPECT_FALSE(a == init_model(cfg, 12));
    const auto tokens = bytes("zero delta at init");
    EXPECT_TRUE(bitwise_equal(forward(a, tokens), forward(strip_adapters(a), tokens)));
}

TEST(InitModel, EveryLinearHasOneAdapter) {
    const Parameters p = init_model(small_config(), 1);
    const auto linears = p.linears();
    EXPECT_EQ(linears.size(), 2u * 7u + 1u);
    for (const Linear* l : linears) {
        ASSERT_TRUE(l->adapter.has_value());
        EXPECT_EQ(l->adapter->a.rows(), 4u);
        EXPECT_EQ(l->adapter->a.cols(), l->in_features());
        EXPECT_EQ(l->adapter->b.rows(), l->out_features());
        EXPECT_EQ(l->adapter->b, Matrix(l->out_features(), 4));
    }
    EXPECT_EQ(p.trainable_tensors().size(), 2 * linears.size());

    auto cfg = small_config();
    cfg.lora_target = LoraTarget::attention_mlp;
    const Parameters q = init_model(cfg, 1);
    EXPECT_FALSE(q.head.adapter.has_value());
    EXPECT_EQ(q.trainable_tensors().size(), 2u * 14u);
}

TEST(Forward, ShapeDeterminismAndLength) {
    const Parameters p = testing::toy_model(32, 4, 2, 3, 0.1);
    const auto tokens = bytes("shape");
    const Matrix a = forward(p, tokens);
    EXPECT_EQ(a.rows(), tokens.size());
    EXPECT_EQ(a.cols(), static_cast<std::size_t>(ByteVocab::size));
    EXPECT_TRUE(bitwise_equal(a, forward(p, tokens)));
    EXPECT_TRUE(bitwise_equal(forward(p, tokens, Mode::train, 9), forward(p, tokens, Mode::train, 9)));
    EXPECT_FALSE(bitwise_equal(forward(p, tokens, Mode::train, 9), forward(p, tokens, Mode::train, 10)));

    const std::vector<TokenId> too_long(65, 65);
    try {
        forward(p, too_long);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::length);
    }
    const std::vector<TokenId> bad{ByteVocab::bos, 400};
    EXPECT_THROW(forward(p, bad), Error);
}

TEST(Forward, Causality) {
    const Parameters p = testing::toy_model(32, 4, 2, 4);
    auto tokens = bytes("causal masking check");
    const Matrix base = forward(p, tokens);
    for (std::size_t t = 1; t < tokens.size(); t += 3) {
        auto changed = tokens;
        changed[t] = changed[t] == 'x' ? 'y' : 'x';
        const Matrix out = forward(p, changed);
        for (std::size_t s = 0; s < t; ++s) {
            ASSERT_TRUE(bitwise_equal(out.row(s), base.row(s))) << "perturbed " << t << " row " << s;
        }
        EXPECT_FALSE(bitwise_equal(out.row(t), base.row(t)));
    }
}

TEST(Forward, ZeroScaledAdapterEqualsBase) {
    Parameters p = testing::toy_model(32, 4, 1, 5);
    const auto tokens = bytes("additivity");
    for (Linear* l : p.linears()) {
        l->adapter->b.fill(0.0);
    }
    EXPECT_TRUE(bitwise_equal(forward(p, tokens), forward(strip_adapters(p), tokens)));
}

TEST(Merge, EquivalenceAndIdempotence) {
    const Parameters p = testing::toy_model(32, 4, 2, 6);
    const Parameters m = merge_adapters(p);
    for (const Linear* l : m.linears()) {
        EXPECT_FALSE(l->adapter.has_value());
    }
    const auto tokens = bytes("merge equivalence");
    EXPECT_LE(max_abs_diff(forward(p, tokens), forward(m, tokens)), 1e-10);
    EXPECT_TRUE(merge_adapters(m) == m);
}

TEST(Merge, ZeroBKeepsBaseBitwise) {
    const Parameters p = init_model(small_config(), 8);
    const Parameters m = merge_adapters(p);
    const auto a = p.linears();
    const auto b = m.linears();
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_TRUE(bitwise_equal(a[i]->weight, b[i]->weight));
    }
}

TEST(Loss, UniformAndErrors) {
    const Matrix uniform(3, 4, 0.0);
    const std::vector<TokenId> t{0, 1, 2};
    const std::vector<std::uint8_t> mask{0, 1, 1};
    EXPECT_NEAR(loss(uniform, t, mask), std::log(4.0), 1e-15);
    Matrix sharp(3, 4, 0.0);
    sharp(0, 1) = 50.0;
    sharp(1, 2) = 50.0;
    EXPECT_LT(loss(sharp, t, mask), 1e-20);
    const std::vector<std::uint8_t> none{0, 0, 0};
    try {
        loss(uniform, t, none);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::loss);
    }
}

TEST(Backward, MatchesFiniteDifferences) {
    Parameters p = testing::toy_model(32, 2, 1, 9, 0.1);
    quantize_base(p, 64, QuantMode::absmax_int4);
    const auto tokens = bytes("grad check");
    std::vector<std::uint8_t> mask(tokens.size(), 1);
    mask[0] = 0;
    const auto gc = testing::finite_difference_check(p, tokens, mask, 42, 1e-5);
    EXPECT_LT(gc.max_rel_err, 1e-4) << gc.worst;
}

TEST(Backward, ZeroBGivesZeroAGradients) {
    const Parameters p = init_model(small_config(), 10);
    const auto tokens = bytes("b is zero");
    std::vector<std::uint8_t> mask(tokens.size(), 1);
    mask[0] = 0;
    const auto g = backward(p, tokens, mask, 1);
    const auto names = p.trainable_names();
    bool some_b_nonzero = false;
    for (std::size_t k = 0; k < names.size(); ++k) {
        const bool is_a = names[k].ends_with("lora_a");
        for (double v : g.grads[k].values()) {
            if (is_a) {
                ASSERT_EQ(v, 0.0) << names[k];
            } else if (v != 0.0) {
                some_b_nonzero = true;
            }
        }
    }
    EXPECT_TRUE(some_b_nonzero);
}

TEST(Backward, GradientsOnlyForLoraTensors) {
    const Parameters p = testing::toy_model(32, 4, 2, 12);
    const auto tokens = bytes("trainable set");
    std::vector<std::uint8_t> mask(tokens.size(), 1);
    mask[0] = 0;
    const auto g = backward(p, tokens, mask, 3);
    const auto tensors = p.trainable_tensors();
    ASSERT_EQ(g.grads.size(), tensors.size());
    for (std::size_t k = 0; k < tensors.size(); ++k) {
        EXPECT_EQ(g.grads[k].rows(), tensors[k]->rows());
        EXPECT_EQ(g.grads[k].cols(), tensors[k]->cols());
    }
    for (const auto& name : p.trainable_names()) {
        EXPECT_TRUE(name.ends_with(".lora_a") || name.ends_with(".lora_b")) << name;
    }
    EXPECT_NEAR(g.loss, loss(forward(p, tokens, Mode::train, 3), tokens, mask), 1e-12);
}

}  // namespace
}  // namespace smmini

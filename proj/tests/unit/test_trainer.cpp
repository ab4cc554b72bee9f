#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "oracles.hpp"
#include "smmini/checkpoint.hpp"
#include "smmini/error.hpp"
#include "smmini/trainer.hpp"

namespace smmini {
namespace {

Corpus micro_corpus() {
    const std::vector<ManifestEntry> m{{testing::data_path("micro_corpus.jsonl"), "micro"}};
    return ingest_corpus(m).first;
}

struct Tiny {
    std::vector<TrainingSequence> data;
    Parameters params;
    TrainConfig cfg;
};

Tiny tiny_setup(std::int64_t max_steps = 0) {
    ModelConfig mc;
    mc.d_model = 32;
    mc.n_layers = 1;
    mc.d_ff = 64;
    mc.max_sequence_length = 64;
    mc.lora_r = 4;
    mc.lora_alpha = 8;
    Tiny t;
    t.cfg.sequence_length = 64;
    t.cfg.minibatch_size = 4;
    t.cfg.epochs = 3;
    t.cfg.max_steps = max_steps;
    t.cfg.seed = 77;
    t.data = pack_corpus(micro_corpus(), 64, false);
    t.data.resize(12);
    t.params = init_model(mc, 5);
    quantize_base(t.params, 64, QuantMode::absmax_int4);
    return t;
}

TEST(TrainConfig, PublishedDefaults) {
    const TrainConfig t;
    const ModelConfig m;
    EXPECT_EQ(t.sequence_length, 1024);
    EXPECT_EQ(m.lora_r, 64);
    EXPECT_EQ(m.lora_alpha, 16.0);
    EXPECT_EQ(m.lora_dropout, 0.1);
    EXPECT_EQ(m.lora_target, LoraTarget::all_linear);
    EXPECT_EQ(t.grad_accumulation_steps, 1);
    EXPECT_EQ(t.minibatch_size, 32);
    EXPECT_EQ(t.epochs, 5);
    EXPECT_EQ(t.optimizer, Optimizer::adamw);
    EXPECT_EQ(t.lr_schedule, LrSchedule::constant);
    EXPECT_EQ(t.learning_rate, 2e-4);
}

TEST(TrainConfig, ConstantSchedule) {
    const TrainConfig t;
    EXPECT_EQ(t.lr_at(1), 2e-4);
    EXPECT_EQ(t.lr_at(10 * 37), 2e-4);
    TrainConfig bad;
    bad.learning_rate = -1;
    EXPECT_THROW(bad.validate(), Error);
}

double one_step(double w, double g, double wd) {
    Matrix p(1, 1, w);
    const std::vector<Matrix*> params{&p};
    const std::vector<Matrix> grads{Matrix(1, 1, g)};
    OptimizerState st{{Matrix(1, 1)}, {Matrix(1, 1)}, 0};
    TrainConfig cfg;
    cfg.weight_decay = wd;
    adamw_step(params, grads, st, cfg);
    EXPECT_EQ(st.step, 1);
    return p(0, 0);
}

TEST(AdamW, HandComputedSteps) {
    // m_hat = 1, v_hat = 1 after bias correction: w' = 1 - 2e-4 / (1 + 1e-8).
    EXPECT_NEAR(one_step(1.0, 1.0, 0.0), 0.99980000000199999998, 1e-12);
    // Decay term only: w' = 1 - 2e-4 * 0.01.
    EXPECT_NEAR(one_step(1.0, 0.0, 0.01), 0.999998, 1e-12);
    EXPECT_EQ(one_step(0.75, 0.0, 0.0), 0.75);
}

TEST(AdamW, SecondStepMatchesHandComputation) {
    Matrix p(1, 1, 1.0);
    const std::vector<Matrix*> params{&p};
    OptimizerState st{{Matrix(1, 1)}, {Matrix(1, 1)}, 0};
    const TrainConfig cfg;
    adamw_step(params, std::vector<Matrix>{Matrix(1, 1, 1.0)}, st, cfg);
    adamw_step(params, std::vector<Matrix>{Matrix(1, 1, -2.0)}, st, cfg);
    const double m = 0.9 * 0.1 + 0.1 * -2.0;
    const double v = 0.999 * 0.001 + 0.001 * 4.0;
    const double mhat = m / (1 - 0.81);
    const double vhat = v / (1 - 0.999 * 0.999);
    const double w1 = 1.0 - 2e-4 / (1.0 + 1e-8);
    EXPECT_NEAR(p(0, 0), w1 - 2e-4 * mhat / (std::sqrt(vhat) + 1e-8), 1e-12);
}

TEST(AdamW, NonFiniteGradientNamesTensorAndStep) {
    Matrix p(1, 2, 1.0);
    const std::vector<Matrix*> params{&p};
    Matrix g(1, 2);
    g(0, 1) = NAN;
    OptimizerState st{{Matrix(1, 2)}, {Matrix(1, 2)}, 4};
    const std::vector<std::string> names{"layers.0.wq.lora_b"};
    try {
        adamw_step(params, std::vector<Matrix>{g}, st, TrainConfig{}, names);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::train);
        const std::string what = e.what();
        EXPECT_NE(what.find("layers.0.wq.lora_b"), std::string::npos);
        EXPECT_NE(what.find("5"), std::string::npos);
    }
}

TEST(Trainer, StepCountFollowsEpochsAndBatches) {
    Tiny t = tiny_setup();
    Trainer tr(t.data, t.params, t.cfg);
    EXPECT_EQ(tr.batches_per_epoch(), 3);
    EXPECT_EQ(tr.total_steps(), 9);
    std::vector<StepMetrics> log;
    tr.run({[&](const StepMetrics& m) { log.push_back(m); }, {}});
    ASSERT_EQ(log.size(), 9u);
    for (std::size_t i = 0; i < log.size(); ++i) {
        EXPECT_EQ(log[i].step, static_cast<std::int64_t>(i + 1));
        EXPECT_EQ(log[i].epoch, static_cast<int>(i / 3));
        EXPECT_EQ(log[i].lr, 2e-4);
    }
}

TEST(Trainer, AccumulationDividesSteps) {
    Tiny t = tiny_setup();
    t.cfg.grad_accumulation_steps = 3;
    Trainer tr(t.data, t.params, t.cfg);
    EXPECT_EQ(tr.steps_per_epoch(), 1);
    EXPECT_EQ(tr.total_steps(), 3);
}

TEST(Trainer, DeterministicForSeed) {
    Tiny t = tiny_setup();
    Trainer a(t.data, t.params, t.cfg);
    Trainer b(t.data, t.params, t.cfg);
    a.run();
    b.run();
    EXPECT_TRUE(a.params() == b.params());
    t.cfg.seed = 78;
    Trainer c(t.data, t.params, t.cfg);
    c.run();
    EXPECT_FALSE(a.params() == c.params());
}

TEST(Trainer, ThreadedRunMatchesSerial) {
    Tiny t = tiny_setup(4);
    Trainer a(t.data, t.params, t.cfg);
    t.cfg.threads = 3;
    Trainer b(t.data, t.params, t.cfg);
    a.run();
    b.run();
    const auto ta = a.params().trainable_tensors();
    const auto tb = b.params().trainable_tensors();
    for (std::size_t k = 0; k < ta.size(); ++k) {
        EXPECT_TRUE(bitwise_equal(*ta[k], *tb[k]));
    }
}

TEST(Trainer, FreezesBaseAndStateMirrorsTrainables) {
    Tiny t = tiny_setup();
    const auto before = t.params.frozen_snapshot();
    Trainer tr(t.data, t.params, t.cfg);
    tr.run();
    const auto after = tr.params().frozen_snapshot();
    ASSERT_EQ(before.size(), after.size());
    for (std::size_t i = 0; i < before.size(); ++i) {
        EXPECT_TRUE(bitwise_equal(before[i].second, after[i].second)) << before[i].first;
    }
    const auto trainables = tr.params().trainable_tensors();
    ASSERT_EQ(tr.optimizer().m.size(), trainables.size());
    for (std::size_t k = 0; k < trainables.size(); ++k) {
        EXPECT_EQ(tr.optimizer().m[k].rows(), trainables[k]->rows());
        EXPECT_EQ(tr.optimizer().v[k].cols(), trainables[k]->cols());
    }
}

TEST(Trainer, AllExamplesUnusableIsTrainError) {
    Corpus c;
    c.records.push_back({"s", std::string(200, 'c'), "q", "a", "id"});
    try {
        pack_corpus(c, 16, true);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::train);
    }
}

TEST(Trainer, NonFiniteLossIsTrainError) {
    Tiny t = tiny_setup(2);
    t.params.head.weight(0, 0) = NAN;
    Trainer tr(t.data, t.params, t.cfg);
    try {
        tr.step();
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::train);
        EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
    }
}

TEST(Checkpoint, RoundTripIsBitwise) {
    Tiny t = tiny_setup(3);
    Trainer tr(t.data, t.params, t.cfg);
    tr.run();
    const Checkpoint ck = tr.checkpoint();
    const auto dir = testing::scratch_dir("ckpt_roundtrip");
    save_checkpoint(dir / "c.bin", ck);
    const Checkpoint back = load_checkpoint(dir / "c.bin");
    EXPECT_TRUE(bitwise_equal(ck, back));
    EXPECT_TRUE(back.params == ck.params);
    EXPECT_TRUE(back.optimizer == ck.optimizer);
    EXPECT_EQ(back.train_config, ck.train_config);
    EXPECT_EQ(back.step, 3);
}

TEST(Checkpoint, CorruptionIsCheckpointError) {
    Tiny t = tiny_setup(1);
    Trainer tr(t.data, t.params, t.cfg);
    tr.run();
    std::ostringstream out;
    write_checkpoint(out, tr.checkpoint());
    const std::string bytes = out.str();
    auto expect_error = [](const std::string& b, const char* what) {
        try {
            read_checkpoint(b);
            ADD_FAILURE() << what;
        } catch (const Error& e) {
            EXPECT_EQ(e.kind(), ErrorKind::checkpoint) << what;
        }
    };
    std::string first = bytes;
    first[0] ^= 0x01;
    expect_error(first, "magic");
    std::string version = bytes;
    version[8] = 9;
    expect_error(version, "version");
    expect_error(bytes.substr(0, bytes.size() / 2), "truncated");
    std::string flipped = bytes;
    flipped[bytes.size() / 2] ^= 0x10;
    expect_error(flipped, "payload bit flip");
    expect_error(bytes + "x", "trailing");
    expect_error("", "empty");
}

TEST(Checkpoint, ResumeMatchesStraightRun) {
    Tiny t = tiny_setup();
    Trainer straight(t.data, t.params, t.cfg);
    straight.run();

    Trainer first(t.data, t.params, t.cfg);
    first.run({}, 4);
    ASSERT_EQ(first.global_step(), 4);
    std::ostringstream out;
    write_checkpoint(out, first.checkpoint());
    Trainer second(t.data, read_checkpoint(out.str()));
    second.run();
    EXPECT_EQ(second.global_step(), straight.global_step());
    EXPECT_TRUE(bitwise_equal(second.checkpoint(), straight.checkpoint()));
}

TEST(Trainer, LossDecreasesOnMicroCorpus) {
    Tiny t = tiny_setup();
    t.params.config.lora_alpha = 64;
    for (Linear* l : t.params.linears()) {
        l->adapter->alpha = 64;
    }
    t.cfg.epochs = 10;
    const double before = mean_loss(t.params, t.data);
    Trainer tr(t.data, t.params, t.cfg);
    tr.run();
    EXPECT_LT(mean_loss(tr.params(), t.data), before);
}

TEST(Metrics, JsonlLine) {
    const StepMetrics m{3, 1, 2.5, 2e-4};
    const std::string line = to_jsonl(m);
    EXPECT_NE(line.find("\"step\":3"), std::string::npos);
    EXPECT_NE(line.find("\"epoch\":1"), std::string::npos);
    EXPECT_NE(line.find("\"loss\":2.5"), std::string::npos);
    EXPECT_NE(line.find("\"lr\":0.0002"), std::string::npos);
}

}  // namespace
}  // namespace smmini

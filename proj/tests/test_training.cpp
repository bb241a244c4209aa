#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_util.hpp"

using namespace qsrec;

namespace {

SessionCorpus tiny_corpus(std::uint64_t seed, std::size_t vocab = 20, std::size_t sessions = 8) {
    SessionCorpus c;
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < vocab; ++i) c.vocab.add(std::to_string(i));
    for (std::size_t s = 0; s < sessions; ++s) {
        Session x;
        const std::size_t len = 2 + s % 4;
        for (std::size_t i = 0; i < len; ++i) x.push_back(static_cast<std::uint32_t>(rng() % vocab));
        c.sessions.push_back(std::move(x));
    }
    return c;
}

template <class T>
void randomize(Model<T>& m, std::uint64_t seed, double scale) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-scale, scale);
    m.for_each_parameter([&](const std::string&, Tensor<T>& t) {
        for (auto& x : t.data()) x = static_cast<T>(u(rng));
    });
}

const Tensor<double>* const kNoMask = nullptr;

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST(Batcher, HandTrace) {
    const std::vector<Session> sessions{{1, 2, 3}, {4, 5}};
    SessionParallelBatcher b(sessions, 2);
    Batch batch;
    ASSERT_TRUE(b.next(batch));
    EXPECT_EQ(batch[0], (BatchSlot{1, 2, true, true}));
    EXPECT_EQ(batch[1], (BatchSlot{4, 5, true, true}));
    ASSERT_TRUE(b.next(batch));
    EXPECT_EQ(batch[0], (BatchSlot{2, 3, false, true}));
    EXPECT_FALSE(batch[1].active);
    EXPECT_FALSE(b.next(batch));
}

TEST(Batcher, ReplacesFinishedSessionInPlace) {
    const std::vector<Session> sessions{{1, 2}, {3, 4, 5}, {6, 7}};
    SessionParallelBatcher b(sessions, 2);
    Batch batch;
    ASSERT_TRUE(b.next(batch));
    ASSERT_TRUE(b.next(batch));
    EXPECT_EQ(batch[0], (BatchSlot{6, 7, true, true}));
    EXPECT_EQ(batch[1], (BatchSlot{4, 5, false, true}));
}

TEST(Batcher, BatchOfOneIsSequential) {
    SessionCorpus c;
    c.sessions = {{1, 2, 3}, {4, 5}, {6, 7, 8, 9}};
    std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
    for (const auto& batch : session_parallel_batches(c, 1)) pairs.emplace_back(batch[0].input, batch[0].target);
    const std::vector<std::pair<std::uint32_t, std::uint32_t>> want{{1, 2}, {2, 3}, {4, 5}, {6, 7}, {7, 8}, {8, 9}};
    EXPECT_EQ(pairs, want);
}

TEST(Batcher, PairCountOverRandomCorpora) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto c = tiny_corpus(seed, 30, 5 + seed);
        for (std::size_t bs : {1u, 2u, 3u, 7u, 64u}) {
            std::size_t emitted = 0;
            for (const auto& batch : session_parallel_batches(c, bs))
                for (const auto& slot : batch) emitted += slot.active ? 1 : 0;
            EXPECT_EQ(emitted, c.pair_count());
        }
    }
}

TEST(Batcher, RejectsBadInput) {
    const std::vector<Session> none;
    EXPECT_THROW(SessionParallelBatcher(none, 2), Error);
    const std::vector<Session> short_one{{1}};
    EXPECT_THROW(SessionParallelBatcher(short_one, 2), Error);
    const std::vector<Session> ok{{1, 2}};
    EXPECT_THROW(SessionParallelBatcher(ok, 0), Error);
}

TEST(Bpr, HandValues) {
    const std::vector<double> same{0.5};
    EXPECT_NEAR(bpr_loss(0.5, same), std::log(2.0), 1e-15);
    const std::vector<double> far{-1e6};
    EXPECT_NEAR(bpr_loss(1e6, far), 0.0, 1e-300);
    const std::vector<double> two{0.0, 2.0};
    const double want = (-std::log(sigmoid_ref(1.0)) - std::log(sigmoid_ref(-1.0))) / 2.0;
    EXPECT_NEAR(bpr_loss(1.0, two), want, 1e-15);
    EXPECT_NEAR(bpr_loss(1.0, two), 0.813262, 1e-6);
    EXPECT_THROW(bpr_loss(1.0, std::span<const double>{}), Error);
    EXPECT_TRUE(std::isfinite(softplus(1e308)));
}

TEST(Bpr, BatchLossUsesOtherActiveTargets) {
    StepWorkspace<double> ws;
    ws.active = {0, 2, 3};
    ws.scores = Tensor<double>({3, 3});
    std::mt19937_64 rng(2);
    for (auto& v : ws.scores.data()) v = std::uniform_real_distribution<double>(-2, 2)(rng);
    const StepResult r = bpr_batch_loss(ws);
    double want = 0.0;
    for (std::size_t a = 0; a < 3; ++a) {
        std::vector<double> negs;
        for (std::size_t c = 0; c < 3; ++c)
            if (c != a) negs.push_back(ws.scores(a, c));
        want += bpr_loss(ws.scores(a, a), negs);
    }
    EXPECT_NEAR(r.loss, want / 3.0, 1e-14);
    EXPECT_EQ(r.scored, 3u);

    ws.active = {1};
    ws.scores = Tensor<double>({1, 1});
    EXPECT_EQ(bpr_batch_loss(ws).scored, 0u);
}

TEST(Gradients, QuadraticFormDerivatives) {
    std::mt19937_64 rng(31);
    const std::size_t n = 5;
    const auto a = qsrec::testing::random_symmetric(rng, n);
    const auto y = qsrec::testing::random_vector(rng, n);
    // d/dA_packed = gamma2(y); d/dy = 2 A y.
    const auto g2 = gamma2(y);
    const double eps = 1e-6;
    auto packed = std::vector<double>(a.packed().begin(), a.packed().end());
    for (std::size_t p = 0; p < packed.size(); ++p) {
        auto up = packed, dn = packed;
        up[p] += eps;
        dn[p] -= eps;
        const double num = (quadratic_form(PackedSymMatrix(n, up), y) - quadratic_form(PackedSymMatrix(n, dn), y)) / (2 * eps);
        EXPECT_NEAR(num, g2[p], 1e-8);
    }
    const auto dense = a.dense();
    for (std::size_t i = 0; i < n; ++i) {
        double ay = 0.0;
        for (std::size_t j = 0; j < n; ++j) ay += dense[i * n + j] * y[j];
        auto up = y, dn = y;
        up[i] += eps;
        dn[i] -= eps;
        EXPECT_NEAR((quadratic_form(a, up) - quadratic_form(a, dn)) / (2 * eps), 2 * ay, 1e-8);
    }
}

TEST(Gradients, FullPipelinePerHead) {
    const auto corpus = tiny_corpus(3);
    for (const auto& shape : {ModelShape::vector(20, 4, 4), ModelShape::fc(20, 4, 5, 4), ModelShape::matrix(20, 4, 4)}) {
        for (double scale : {0.05, 0.5}) {
            Model<double> m(shape);
            randomize(m, 17, scale);
            const auto rep = grad_check(m, corpus);
            EXPECT_LE(rep.max_rel_error, 1e-4) << head_name(shape.head) << " scale " << scale << " worst "
                                              << rep.worst_tensor << "[" << rep.worst_index << "]";
            EXPECT_EQ(rep.coordinates, rep.batches * parameter_count(shape));
            EXPECT_GT(rep.batches, 0u);
        }
        GradCheckOptions opts;
        opts.dropout_keep = 0.5;
        EXPECT_LE(grad_check(Model<double>::initialized(shape, 9), corpus, opts).max_rel_error, 1e-4);
    }
}

TEST(Gradients, OutputLayerIsExact) {
    // Scores are linear in the vector head's output weights and biases, so
    // central differences agree to near machine precision.
    const auto corpus = tiny_corpus(8);
    Model<double> m(ModelShape::vector(20, 3, 4));
    randomize(m, 5, 0.5);
    const auto batches = session_parallel_batches(corpus, 4);
    Tensor<double> hidden({4, 4});
    StepWorkspace<double> ws, scratch;
    Model<double> grads(m.shape());
    forward_step(m, batches[0], hidden, kNoMask, ws);
    backward_step(m, batches[0], kNoMask, ws, grads);
    for (const char* name : {"softmax_W", "softmax_b"}) {
        Tensor<double>& p = *m.tensor_by_name(name);
        const Tensor<double>& g = *grads.tensor_by_name(name);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double orig = p[i];
            p[i] = orig + 1e-4;
            const double up = forward_step(m, batches[0], hidden, kNoMask, scratch).loss;
            p[i] = orig - 1e-4;
            const double dn = forward_step(m, batches[0], hidden, kNoMask, scratch).loss;
            p[i] = orig;
            EXPECT_NEAR((up - dn) / 2e-4, g[i], 1e-8) << name << "[" << i << "]";
        }
    }
}

TEST(Gradients, FcDenseBiasIsSummedUpstream) {
    const auto corpus = tiny_corpus(4);
    const auto m = Model<double>::initialized(ModelShape::fc(20, 4, 5, 3), 2);
    const auto batches = session_parallel_batches(corpus, 4);
    Tensor<double> hidden({4, 5});
    StepWorkspace<double> ws;
    Model<double> grads(m.shape());
    forward_step(m, batches[0], hidden, kNoMask, ws);
    backward_step(m, batches[0], kNoMask, ws, grads);
    for (std::size_t k = 0; k < grads.dense.bias.size(); ++k) {
        double sum = 0.0;
        for (std::size_t a = 0; a < ws.active.size(); ++a) sum += ws.d_rep(a, k);
        EXPECT_NEAR(grads.dense.bias[k], sum, 1e-15);
    }
}

TEST(Gradients, FlatLossGivesZeroGradient) {
    // Every slot has the same target, so all margins are 0 and the gradients
    // of the positive and negative terms cancel.
    Model<double> m = Model<double>::initialized(ModelShape::matrix(5, 3, 3), 1);
    Batch batch{{1, 2, true, true}, {3, 2, true, true}, {4, 2, true, true}};
    Tensor<double> hidden({3, 6});
    StepWorkspace<double> ws;
    Model<double> grads(m.shape());
    const auto r = forward_step(m, batch, hidden, kNoMask, ws);
    EXPECT_NEAR(r.loss, std::log(2.0), 1e-15);
    backward_step(m, batch, kNoMask, ws, grads);
    grads.for_each_parameter([](const std::string& name, const Tensor<double>& t) {
        for (double v : t.data()) EXPECT_NEAR(v, 0.0, 1e-15) << name;
    });
}

TEST(Adam, FirstStepMovesByLearningRate) {
    const auto shape = ModelShape::matrix(3, 2, 2);
    Model<double> p(shape), g(shape);
    AdamState<double> st(shape);
    g.gru.candidate_bias[0] = 3.0;
    g.gru.candidate_bias[1] = -1e-3;
    adam_update(p, g, st, 0.01);
    EXPECT_NEAR(p.gru.candidate_bias[0], -0.01, 1e-8);
    EXPECT_NEAR(p.gru.candidate_bias[1], 0.01, 1e-6);
    EXPECT_EQ(p.gru.candidate_bias[2], 0.0);
    EXPECT_EQ(st.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParameters) {
    const auto shape = ModelShape::vector(3, 2, 2);
    Model<double> p = Model<double>::initialized(shape, 3);
    const Model<double> before = p;
    Model<double> g(shape);
    AdamState<double> st(shape);
    for (int i = 0; i < 10; ++i) adam_update(p, g, st, 0.1);
    EXPECT_TRUE(p == before);
}

TEST(Adam, TwoStepsHandUnrolled) {
    const auto shape = ModelShape::vector(1, 1, 1);
    Model<double> p(shape), g(shape);
    AdamState<double> st(shape);
    const double grad = 0.7, lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    p.embeddings.output_bias[0] = 1.0;
    g.embeddings.output_bias[0] = grad;
    adam_update(p, g, st, lr);
    adam_update(p, g, st, lr);
    double x = 1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 2; ++t) {
        m = b1 * m + (1 - b1) * grad;
        v = b2 * v + (1 - b2) * grad * grad;
        x -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    }
    EXPECT_DOUBLE_EQ(p.embeddings.output_bias[0], x);
}

TEST(Train, ZeroEpochsReturnsInitialization) {
    const auto corpus = tiny_corpus(1);
    TrainConfig cfg;
    cfg.epochs = 0;
    const auto shape = ModelShape::matrix(20, 4, 3);
    const auto r = train<float>(corpus, shape, cfg);
    EXPECT_TRUE(r.model == Model<float>::initialized(shape, cfg.seed));
    EXPECT_TRUE(r.trace.empty());
}

TEST(Train, DeterministicAndLossDecreases) {
    const auto corpus = qsrec::testing::two_interest_corpus(5, 300, 40);
    for (const auto& shape : {ModelShape::vector(40, 8, 8), ModelShape::fc(40, 8, 8, 4), ModelShape::matrix(40, 8, 4)}) {
        TrainConfig cfg;
        cfg.batch_size = 32;
        cfg.epochs = 4;
        cfg.learning_rate = 0.01;
        cfg.dropout_keep = 0.8;
        const auto a = train<float>(corpus, shape, cfg);
        const auto b = train<float>(corpus, shape, cfg);
        EXPECT_EQ(a.trace, b.trace);
        EXPECT_TRUE(a.model == b.model);
        ASSERT_EQ(a.epoch_mean_loss.size(), 4u);
        EXPECT_LT(a.epoch_mean_loss.back(), a.epoch_mean_loss.front()) << head_name(shape.head);
        cfg.seed = 43;
        EXPECT_NE(train<float>(corpus, shape, cfg).trace, a.trace);
    }
}

TEST(Train, RejectsBadConfigAndIds) {
    const auto corpus = tiny_corpus(1);
    TrainConfig cfg;
    cfg.learning_rate = 0;
    EXPECT_THROW(train<float>(corpus, ModelShape::matrix(20, 4, 3), cfg), Error);
    cfg = {};
    cfg.dropout_keep = 0;
    EXPECT_THROW(train<float>(corpus, ModelShape::matrix(20, 4, 3), cfg), Error);
    cfg = {};
    EXPECT_THROW(train<float>(corpus, ModelShape::matrix(10, 4, 3), cfg), Error);
}

TEST(Train, NonFiniteLossRaisesTrainingError) {
    const auto corpus = tiny_corpus(2);
    auto state = init_training<float>(ModelShape::vector(20, 4, 4), TrainConfig{});
    state.model.embeddings.output_bias[corpus.sessions[0][1]] = std::numeric_limits<float>::infinity();
    try {
        train_epoch(state, corpus, TrainConfig{});
        FAIL() << "expected training-error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::kTraining);
    }
}

TEST(Train, LossRecordFormat) {
    EXPECT_EQ(format_loss_record({2, 17, 0.5}), "epoch 2 step 17 loss 0.5\n");
}

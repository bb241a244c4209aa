#include <gtest/gtest.h>

#include <filesystem>

#include "test_util.hpp"

using namespace qsrec;

namespace {

template <class T>
TrainState<T> trained_state(const ModelShape& shape, std::size_t epochs) {
    const auto corpus = qsrec::testing::two_interest_corpus(2, 30, shape.vocab, 3, 6);
    TrainConfig cfg;
    cfg.batch_size = 8;
    cfg.seed = 5;
    cfg.dropout_keep = 0.8;
    auto state = init_training<T>(shape, cfg);
    for (std::size_t e = 0; e < epochs; ++e) train_epoch(state, corpus, cfg);
    return state;
}

template <class T>
void expect_same_state(const TrainState<T>& a, const TrainState<T>& b) {
    EXPECT_TRUE(a.model == b.model);
    EXPECT_TRUE(a.adam.m == b.adam.m);
    EXPECT_TRUE(a.adam.v == b.adam.v);
    EXPECT_EQ(a.adam.step, b.adam.step);
    EXPECT_EQ(a.epochs_done, b.epochs_done);
}

}  // namespace

TEST(Checkpoint, RoundTripFloatAllHeads) {
    for (const auto& shape : {ModelShape::vector(20, 3, 5), ModelShape::fc(20, 3, 5, 3), ModelShape::matrix(20, 3, 3)}) {
        const auto state = trained_state<float>(shape, 1);
        const auto c = Checkpoint::from_state(state, 5);
        const auto back = decode_checkpoint(encode_checkpoint(c));
        EXPECT_EQ(back.header, c.header);
        EXPECT_EQ(back.header.precision, 32);
        expect_same_state(std::get<TrainState<float>>(back.state), state);
        EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(c));
    }
}

TEST(Checkpoint, RoundTripDoubleAndFile) {
    const auto state = trained_state<double>(ModelShape::matrix(15, 3, 3), 2);
    const auto c = Checkpoint::from_state(state, 5);
    const auto dir = std::filesystem::temp_directory_path() / "qsrec_test_ckpt";
    std::filesystem::create_directories(dir);
    save_checkpoint(c, dir / "m.qsm");
    const auto back = load_checkpoint(dir / "m.qsm");
    std::filesystem::remove_all(dir);
    EXPECT_EQ(back.header.precision, 64);
    EXPECT_EQ(back.header.epochs_done, 2u);
    expect_same_state(std::get<TrainState<double>>(back.state), state);
    EXPECT_TRUE(checkpoint_model<double>(back) == state.model);
    EXPECT_TRUE(checkpoint_model<float>(back) == state.model.cast<float>());
}

TEST(Checkpoint, WithoutOptimizer) {
    const auto m = Model<float>::initialized(ModelShape::vector(10, 2, 3), 1);
    const auto c = Checkpoint::from_model(m, 1);
    const auto back = decode_checkpoint(encode_checkpoint(c));
    EXPECT_FALSE(back.header.has_optimizer);
    EXPECT_TRUE(checkpoint_model<float>(back) == m);
    EXPECT_LT(encode_checkpoint(c).size(), encode_checkpoint(Checkpoint::from_state(TrainState<float>{m, AdamState<float>(m.shape()), 0}, 1)).size());
}

TEST(Checkpoint, EverySingleByteCorruptionIsDetected) {
    const auto m = Model<float>::initialized(ModelShape::matrix(6, 2, 2), 3);
    const auto bytes = encode_checkpoint(Checkpoint::from_model(m, 3));
    for (std::size_t i = 0; i < bytes.size(); ++i) {
        for (std::uint8_t flip : {std::uint8_t{0x01}, std::uint8_t{0x80}, std::uint8_t{0xff}}) {
            auto bad = bytes;
            bad[i] ^= flip;
            EXPECT_THROW(decode_checkpoint(bad), Error) << "byte " << i;
        }
    }
    auto truncated = bytes;
    truncated.resize(bytes.size() - 1);
    EXPECT_THROW(decode_checkpoint(truncated), Error);
    auto extended = bytes;
    extended.push_back(0);
    EXPECT_THROW(decode_checkpoint(extended), Error);
}

TEST(Checkpoint, ChecksumMismatchIsIoError) {
    const auto m = Model<float>::initialized(ModelShape::vector(5, 2, 2), 3);
    auto bytes = encode_checkpoint(Checkpoint::from_model(m, 3));
    bytes[bytes.size() / 2] ^= 0x10;
    try {
        decode_checkpoint(bytes);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::kIo);
    }
}

TEST(Checkpoint, ResumeEqualsUninterruptedRun) {
    for (const auto& shape : {ModelShape::vector(20, 3, 5), ModelShape::matrix(20, 3, 3)}) {
        const auto corpus = qsrec::testing::two_interest_corpus(2, 30, shape.vocab, 3, 6);
        TrainConfig cfg;
        cfg.batch_size = 8;
        cfg.seed = 5;
        cfg.dropout_keep = 0.8;
        auto straight = init_training<float>(shape, cfg);
        for (int e = 0; e < 3; ++e) train_epoch(straight, corpus, cfg);

        auto first = init_training<float>(shape, cfg);
        train_epoch(first, corpus, cfg);
        const auto bytes = encode_checkpoint(Checkpoint::from_state(first, cfg.seed));
        auto resumed = std::get<TrainState<float>>(decode_checkpoint(bytes).state);
        for (int e = 0; e < 2; ++e) train_epoch(resumed, corpus, cfg);
        expect_same_state(resumed, straight);
    }
}

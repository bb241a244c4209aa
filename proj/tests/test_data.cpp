#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "test_util.hpp"

using namespace qsrec;

namespace {

EventLog csv(const std::string& body) {
    std::istringstream in("SessionId,ItemId,Time\n" + body);
    return parse_click_csv(in, "test.csv");
}

EventLog playlists(std::size_t count) {
    std::string text;
    for (std::size_t i = 0; i < count; ++i) text += "a b c\n";
    std::istringstream in(text);
    return parse_playlist_lines(in);
}

std::vector<std::string> items_of(const SessionEvents& s) {
    std::vector<std::string> out;
    for (const auto& e : s.events) out.push_back(e.item);
    return out;
}

}  // namespace

TEST(Timestamp, EpochAndIso) {
    EXPECT_EQ(parse_timestamp("86400"), 86400);
    EXPECT_EQ(parse_timestamp("1970-01-02T00:00:01.250Z"), 86401);
    EXPECT_EQ(parse_timestamp("2014-04-07 10:51:09"), 1396867869);
    EXPECT_FALSE(parse_timestamp("yesterday"));
    EXPECT_FALSE(parse_timestamp("2014-02-30T00:00:00Z"));
    EXPECT_EQ(utc_day(-1), -1);
}

TEST(ClickCsv, ThreeRows) {
    const auto log = csv("1,A,100\n1,B,200\n2,A,300\n");
    ASSERT_EQ(log.sessions.size(), 2u);
    EXPECT_EQ(log.sessions[0].id, "1");
    EXPECT_EQ(items_of(log.sessions[0]), (std::vector<std::string>{"A", "B"}));
    EXPECT_EQ(items_of(log.sessions[1]), (std::vector<std::string>{"A"}));
    EXPECT_EQ(log.rows, 3u);
    EXPECT_EQ(log.malformed, 0u);
}

TEST(ClickCsv, EmptyFileWarns) {
    std::istringstream in("");
    const auto log = parse_click_csv(in);
    EXPECT_TRUE(log.sessions.empty());
    EXPECT_EQ(log.warnings.size(), 1u);
}

TEST(ClickCsv, ReordersByTimestamp) {
    const auto log = csv("s,C,300\ns,A,100\ns,B,200\n");
    EXPECT_EQ(items_of(log.sessions[0]), (std::vector<std::string>{"A", "B", "C"}));
}

TEST(ClickCsv, BadHeaderAndMalformedRows) {
    std::istringstream bad("a,b,c\n1,2,3\n");
    EXPECT_THROW(parse_click_csv(bad), Error);

    std::string body;
    for (int i = 0; i < 99; ++i) body += "1,A," + std::to_string(i) + "\n";
    body += "1,A,notatime\n";
    EXPECT_EQ(csv(body).malformed, 1u);  // exactly 1% is tolerated
    body += "oops\n";
    try {
        csv(body);
        FAIL() << "expected format-error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::kFormat);
    }
}

TEST(LastDaySplit, TwoTrainOneTest) {
    const std::int64_t d1 = 10 * 86400, d2 = 11 * 86400;
    const auto log = csv("a,X," + std::to_string(d1) + "\nb,Y," + std::to_string(d1 + 5) + "\nc,Z," +
                         std::to_string(d2 + 7) + "\n");
    const auto split = split_by_last_day(log);
    ASSERT_EQ(split.train.sessions.size(), 2u);
    ASSERT_EQ(split.test.sessions.size(), 1u);
    EXPECT_EQ(split.test.sessions[0].id, "c");
}

TEST(LastDaySplit, SameDayIsInputError) {
    const auto log = csv("a,X,100\nb,Y,200\n");
    try {
        split_by_last_day(log);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::kInput);
    }
}

TEST(LastDaySplit, SevenDaysPartition) {
    std::string body;
    std::size_t expect_test = 0;
    for (int s = 0; s < 70; ++s) {
        const int day = s % 7;
        if (day == 6) ++expect_test;
        const std::int64_t t = static_cast<std::int64_t>(day) * 86400 + 3600;
        body += std::to_string(s) + ",I," + std::to_string(t) + "\n";
        body += std::to_string(s) + ",J," + std::to_string(t + 60) + "\n";
    }
    const auto log = csv(body);
    const auto split = split_by_last_day(log);
    EXPECT_EQ(split.test.sessions.size(), expect_test);
    EXPECT_EQ(split.train.sessions.size() + split.test.sessions.size(), log.sessions.size());
    for (const auto& s : split.test.sessions) EXPECT_EQ(std::stoi(s.id) % 7, 6);
    for (const auto& s : split.train.sessions) EXPECT_NE(std::stoi(s.id) % 7, 6);
}

TEST(LastDaySplit, UntimedIsProtocolError) {
    const auto log = playlists(3);
    try {
        split_by_last_day(log);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::kProtocol);
    }
}

TEST(BucketSplit, TestShareNearOneThirtyFirst) {
    const auto log = playlists(31000);
    const auto split = bucket_playlists(log, 7);
    const double p = 1.0 / 31.0;
    const double sigma = std::sqrt(31000.0 * p * (1 - p));
    EXPECT_LE(std::abs(static_cast<double>(split.test.sessions.size()) - 1000.0), 5 * sigma);
    EXPECT_EQ(split.train.sessions.size() + split.test.sessions.size(), 31000u);
}

TEST(BucketSplit, DeterministicAndSingle) {
    const auto log = playlists(500);
    const auto a = bucket_playlists(log, 3);
    const auto b = bucket_playlists(log, 3);
    ASSERT_EQ(a.test.sessions.size(), b.test.sessions.size());
    for (std::size_t i = 0; i < a.test.sessions.size(); ++i) EXPECT_EQ(a.test.sessions[i].id, b.test.sessions[i].id);
    const auto one = bucket_playlists(playlists(1), 3);
    EXPECT_EQ(one.train.sessions.size() + one.test.sessions.size(), 1u);
}

TEST(RecentFraction, KeepsLatestSessions) {
    const auto log = csv("old,A,100\nnew,A,900\nmid,A,500\n");
    const auto kept = keep_recent_fraction(log, 0.5);
    ASSERT_EQ(kept.sessions.size(), 2u);
    EXPECT_EQ(kept.sessions[0].id, "new");
    EXPECT_EQ(kept.sessions[1].id, "mid");
    EXPECT_THROW(keep_recent_fraction(log, 0.0), Error);
}

TEST(Finalize, FiltersRareItemsAndShortSessions) {
    EventLog train, test;
    train.sessions = {{"1", {{"a", {}}, {"b", {}}, {"rare", {}}}},
                      {"2", {{"a", {}}, {"b", {}}}},
                      {"3", {{"a", {}}, {"rare2", {}}}}};
    test.sessions = {{"t1", {{"a", {}}, {"unseen", {}}, {"b", {}}}}, {"t2", {{"unseen", {}}, {"a", {}}}}};
    const auto pair = finalize_corpus(train, test, {2, 2});
    EXPECT_EQ(pair.train.vocab.size(), 2u);
    EXPECT_EQ(pair.train.sessions, (std::vector<Session>{{0, 1}, {0, 1}}));
    EXPECT_EQ(pair.test.sessions, (std::vector<Session>{{0, 1}}));
    for (const auto& s : pair.test.sessions)
        for (auto id : s) EXPECT_LT(id, pair.train.vocab.size());
    EXPECT_THROW(finalize_corpus(train, test, {2, 100}), Error);
}

TEST(Corpus, RoundTripAndCorruption) {
    const auto corpus = qsrec::testing::two_interest_corpus(5, 40);
    const auto bytes = encode_corpus(corpus);
    EXPECT_EQ(decode_corpus(bytes), corpus);

    const auto dir = std::filesystem::temp_directory_path() / "qsrec_test_data";
    std::filesystem::create_directories(dir);
    save_corpus(corpus, dir / "c.qsc");
    EXPECT_EQ(load_corpus(dir / "c.qsc"), corpus);
    std::filesystem::remove_all(dir);

    auto truncated = bytes;
    truncated.resize(bytes.size() - 3);
    EXPECT_THROW(decode_corpus(truncated), Error);
    auto bad_magic = bytes;
    bad_magic[0] ^= 0xff;
    EXPECT_THROW(decode_corpus(bad_magic), Error);
}

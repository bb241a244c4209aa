#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "qsrec/binary_io.hpp"
#include "qsrec/error.hpp"

namespace qsrec {

enum class InputFormat { kClickCsv, kPlaylistLines };

inline InputFormat parse_input_format(const std::string& name) {
    if (name == "click_csv") return InputFormat::kClickCsv;
    if (name == "playlist_lines") return InputFormat::kPlaylistLines;
    fail(ErrorKind::kInput, "unknown input format '" + name + "' (expected click_csv or playlist_lines)");
}

struct Event {
    std::string item;
    std::optional<std::int64_t> timestamp;  // seconds since epoch, UTC
};

struct SessionEvents {
    std::string id;
    std::vector<Event> events;
};

/// Raw sessions in first-appearance order; events within a session are
/// ordered by timestamp when present, file order otherwise.
struct EventLog {
    std::vector<SessionEvents> sessions;
    std::size_t rows = 0;
    std::size_t malformed = 0;
    std::vector<std::string> warnings;

    [[nodiscard]] std::size_t event_count() const {
        std::size_t n = 0;
        for (const auto& s : sessions) n += s.events.size();
        return n;
    }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r' || s.front() == '\n')) {
        s.remove_prefix(1);
    }
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '\n')) {
        s.remove_suffix(1);
    }
    return s;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= s.size(); ++i) {
        if (i == s.size() || s[i] == sep) {
            out.push_back(s.substr(start, i - start));
            start = i + 1;
        }
    }
    return out;
}

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

}  // namespace detail

/// Integer epoch seconds, or ISO-8601 `YYYY-MM-DD[T ]hh:mm:ss[.fff][Z]`
/// read as UTC. Fractional seconds are dropped.
inline std::optional<std::int64_t> parse_timestamp(std::string_view text) {
    text = detail::trim(text);
    if (text.empty()) return std::nullopt;
    const bool all_digits = std::all_of(text.begin() + (text[0] == '-' ? 1 : 0), text.end(),
                                        [](char c) { return c >= '0' && c <= '9'; });
    if (all_digits && text.size() > (text[0] == '-' ? 1u : 0u)) {
        try {
            return std::stoll(std::string(text));
        } catch (...) {
            return std::nullopt;
        }
    }
    const std::string s(text);
    int y = 0, mo = 0, d = 0, hh = 0, mm = 0, ss = 0;
    char sep = 0;
    int consumed = 0;
    if (std::sscanf(s.c_str(), "%4d-%2d-%2d%c%2d:%2d:%2d%n", &y, &mo, &d, &sep, &hh, &mm, &ss, &consumed) != 7 ||
        (sep != 'T' && sep != ' ')) {
        return std::nullopt;
    }
    std::string_view rest = std::string_view(s).substr(static_cast<std::size_t>(consumed));
    if (!rest.empty() && rest.front() == '.') {
        rest.remove_prefix(1);
        while (!rest.empty() && rest.front() >= '0' && rest.front() <= '9') rest.remove_prefix(1);
    }
    if (!rest.empty() && (rest == "Z" || rest == "z")) rest = {};
    if (!rest.empty()) return std::nullopt;
    using namespace std::chrono;
    const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)}, day{static_cast<unsigned>(d)}};
    if (!ymd.ok() || hh > 23 || mm > 59 || ss > 60) return std::nullopt;
    const auto days = sys_days{ymd}.time_since_epoch().count();
    return static_cast<std::int64_t>(days) * 86400 + hh * 3600 + mm * 60 + ss;
}

/// UTC calendar day index of an epoch timestamp.
inline std::int64_t utc_day(std::int64_t seconds) { return detail::floor_div(seconds, 86400); }

namespace detail {

inline void sort_within_sessions(EventLog& log) {
    for (auto& s : log.sessions) {
        const bool timed = std::all_of(s.events.begin(), s.events.end(), [](const Event& e) { return e.timestamp; });
        if (timed) {
            std::stable_sort(s.events.begin(), s.events.end(),
                             [](const Event& a, const Event& b) { return *a.timestamp < *b.timestamp; });
        }
    }
}

inline void check_malformed(const EventLog& log, const std::string& name) {
    // More than 1% bad rows means the file is not what we think it is.
    if (log.malformed * 100 > log.rows) {
        fail(ErrorKind::kFormat, name + ": " + std::to_string(log.malformed) + " of " + std::to_string(log.rows) +
                                     " rows malformed");
    }
}

}  // namespace detail

/// Parses `SessionId,ItemId,Time` rows.
inline EventLog parse_click_csv(std::istream& in, const std::string& name = "<stream>") {
    EventLog log;
    std::string line;
    bool header_seen = false;
    std::unordered_map<std::string, std::size_t> by_id;
    while (std::getline(in, line)) {
        const std::string_view row = detail::trim(line);
        if (row.empty()) continue;
        if (!header_seen) {
            header_seen = true;
            if (row != "SessionId,ItemId,Time") {
                fail(ErrorKind::kFormat, name + ": expected header 'SessionId,ItemId,Time'");
            }
            continue;
        }
        ++log.rows;
        const auto fields = detail::split(row, ',');
        std::optional<std::int64_t> ts;
        if (fields.size() == 3) ts = parse_timestamp(fields[2]);
        if (fields.size() != 3 || detail::trim(fields[0]).empty() || detail::trim(fields[1]).empty() || !ts) {
            ++log.malformed;
            continue;
        }
        const std::string sid(detail::trim(fields[0]));
        auto [it, inserted] = by_id.try_emplace(sid, log.sessions.size());
        if (inserted) log.sessions.push_back({sid, {}});
        log.sessions[it->second].events.push_back({std::string(detail::trim(fields[1])), ts});
    }
    if (!header_seen) log.warnings.push_back(name + ": empty input");
    detail::check_malformed(log, name);
    detail::sort_within_sessions(log);
    return log;
}

/// One playlist per line, whitespace-separated tokens; sessions are named by
/// 1-based line number.
inline EventLog parse_playlist_lines(std::istream& in, const std::string& name = "<stream>") {
    EventLog log;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        ++log.rows;
        std::istringstream tokens(line);
        SessionEvents session{std::to_string(line_no), {}};
        std::string tok;
        while (tokens >> tok) session.events.push_back({tok, std::nullopt});
        log.sessions.push_back(std::move(session));
    }
    if (log.rows == 0) log.warnings.push_back(name + ": empty input");
    return log;
}

inline EventLog load_events(const std::filesystem::path& path, InputFormat format) {
    std::ifstream in(path);
    if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
    return format == InputFormat::kClickCsv ? parse_click_csv(in, path.string())
                                            : parse_playlist_lines(in, path.string());
}

struct EventSplit {
    EventLog train;
    EventLog test;
};

/// Sessions whose last event falls on the latest UTC day form the test set.
inline EventSplit split_by_last_day(const EventLog& log) {
    require(!log.sessions.empty(), ErrorKind::kInput, "split_by_last_day: empty event log");
    std::vector<std::int64_t> end_day(log.sessions.size());
    std::int64_t max_day = std::numeric_limits<std::int64_t>::min();
    for (std::size_t i = 0; i < log.sessions.size(); ++i) {
        const auto& events = log.sessions[i].events;
        std::int64_t last = std::numeric_limits<std::int64_t>::min();
        for (const auto& e : events) {
            if (!e.timestamp) {
                fail(ErrorKind::kProtocol, "split_by_last_day: session '" + log.sessions[i].id +
                                               "' has no timestamps (use bucket split instead)");
            }
            last = std::max(last, *e.timestamp);
        }
        end_day[i] = utc_day(last);
        max_day = std::max(max_day, end_day[i]);
    }
    EventSplit out;
    for (std::size_t i = 0; i < log.sessions.size(); ++i) {
        (end_day[i] == max_day ? out.test : out.train).sessions.push_back(log.sessions[i]);
    }
    require(!out.train.sessions.empty(), ErrorKind::kInput,
            "split_by_last_day: every session ends on the final day; training split would be empty");
    return out;
}

inline constexpr int kPlaylistBuckets = 31;

/// Assigns each session uniformly to one of 31 buckets; bucket 31 is test.
inline EventSplit bucket_playlists(const EventLog& log, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> bucket(1, kPlaylistBuckets);
    EventSplit out;
    for (const auto& s : log.sessions) {
        (bucket(rng) == kPlaylistBuckets ? out.test : out.train).sessions.push_back(s);
    }
    return out;
}

/// Keeps the most recent `fraction` of sessions (by last timestamp when all
/// sessions are timed, by position otherwise).
inline EventLog keep_recent_fraction(const EventLog& log, double fraction) {
    require(fraction > 0.0 && fraction <= 1.0, ErrorKind::kInput, "fraction must be in (0, 1]");
    if (fraction == 1.0) return log;
    std::vector<std::size_t> order(log.sessions.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    auto last_ts = [&](std::size_t i) {
        std::int64_t t = std::numeric_limits<std::int64_t>::min();
        for (const auto& e : log.sessions[i].events) {
            if (!e.timestamp) return std::optional<std::int64_t>{};
            t = std::max(t, *e.timestamp);
        }
        return std::optional<std::int64_t>{t};
    };
    bool timed = true;
    std::vector<std::int64_t> ends(order.size());
    for (std::size_t i = 0; i < order.size() && timed; ++i) {
        const auto t = last_ts(i);
        timed = t.has_value();
        if (timed) ends[i] = *t;
    }
    if (timed) {
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ends[a] < ends[b]; });
    }
    const auto keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(order.size())));
    std::vector<std::size_t> kept(order.end() - static_cast<std::ptrdiff_t>(keep), order.end());
    std::sort(kept.begin(), kept.end());
    EventLog out;
    out.rows = log.rows;
    out.malformed = log.malformed;
    for (std::size_t i : kept) out.sessions.push_back(log.sessions[i]);
    return out;
}

/// Bijective token <-> dense id map.
class Vocab {
   public:
    std::uint32_t add(const std::string& token) {
        auto [it, inserted] = ids_.try_emplace(token, static_cast<std::uint32_t>(tokens_.size()));
        if (inserted) tokens_.push_back(token);
        return it->second;
    }

    [[nodiscard]] std::optional<std::uint32_t> find(const std::string& token) const {
        const auto it = ids_.find(token);
        if (it == ids_.end()) return std::nullopt;
        return it->second;
    }

    [[nodiscard]] const std::string& token(std::uint32_t id) const { return tokens_.at(id); }
    [[nodiscard]] std::size_t size() const noexcept { return tokens_.size(); }
    [[nodiscard]] const std::vector<std::string>& tokens() const noexcept { return tokens_; }

    friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

   private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::uint32_t> ids_;
};

enum class SplitTag : std::uint8_t { kUnspecified = 0, kTrain = 1, kValidation = 2, kTest = 3 };

using Session = std::vector<std::uint32_t>;

struct SessionCorpus {
    std::vector<Session> sessions;
    Vocab vocab;
    SplitTag split = SplitTag::kUnspecified;

    [[nodiscard]] std::size_t event_count() const {
        std::size_t n = 0;
        for (const auto& s : sessions) n += s.size();
        return n;
    }
    [[nodiscard]] std::size_t pair_count() const {
        std::size_t n = 0;
        for (const auto& s : sessions) n += s.size() - 1;
        return n;
    }

    friend bool operator==(const SessionCorpus& a, const SessionCorpus& b) {
        return a.sessions == b.sessions && a.vocab == b.vocab;
    }
};

struct FilterOptions {
    std::size_t min_session_len = 2;
    std::size_t min_item_support = 5;
};

struct CorpusPair {
    SessionCorpus train;
    SessionCorpus test;
};

/// Filters rare items and short sessions and indexes both splits against a
/// vocabulary built from the training split alone.
inline CorpusPair finalize_corpus(const EventLog& train, const EventLog& test, FilterOptions opts = {}) {
    require(opts.min_session_len >= 2, ErrorKind::kInput, "min_session_len must be at least 2");
    std::unordered_map<std::string, std::size_t> support;
    for (const auto& s : train.sessions) {
        for (const auto& e : s.events) ++support[e.item];
    }
    CorpusPair out;
    out.train.split = SplitTag::kTrain;
    out.test.split = SplitTag::kTest;
    std::vector<std::vector<const std::string*>> kept;
    for (const auto& s : train.sessions) {
        std::vector<const std::string*> items;
        for (const auto& e : s.events) {
            if (support[e.item] >= opts.min_item_support) items.push_back(&e.item);
        }
        if (items.size() >= opts.min_session_len) kept.push_back(std::move(items));
    }
    for (const auto& items : kept) {
        Session session;
        session.reserve(items.size());
        for (const auto* tok : items) session.push_back(out.train.vocab.add(*tok));
        out.train.sessions.push_back(std::move(session));
    }
    require(!out.train.sessions.empty(), ErrorKind::kInput, "training split is empty after filtering");
    out.test.vocab = out.train.vocab;
    for (const auto& s : test.sessions) {
        Session session;
        for (const auto& e : s.events) {
            if (const auto id = out.train.vocab.find(e.item)) session.push_back(*id);
        }
        if (session.size() >= opts.min_session_len) out.test.sessions.push_back(std::move(session));
    }
    return out;
}

inline constexpr std::string_view kCorpusMagic = "QSCORP1";

/// Serializes a corpus: magic, u32 V, u32 session count, per session u32
/// length + u32 ids, then V length-prefixed UTF-8 tokens.
inline std::vector<std::uint8_t> encode_corpus(const SessionCorpus& corpus) {
    io::Writer w;
    w.magic(kCorpusMagic);
    w.u32(static_cast<std::uint32_t>(corpus.vocab.size()));
    w.u32(static_cast<std::uint32_t>(corpus.sessions.size()));
    for (const auto& s : corpus.sessions) {
        w.u32(static_cast<std::uint32_t>(s.size()));
        for (std::uint32_t id : s) w.u32(id);
    }
    for (const auto& tok : corpus.vocab.tokens()) w.str(tok);
    return std::move(w.buffer());
}

inline SessionCorpus decode_corpus(const std::vector<std::uint8_t>& bytes, const std::string& name = "corpus") {
    io::Reader r(bytes, name);
    r.expect_magic(kCorpusMagic);
    SessionCorpus corpus;
    const std::uint32_t vocab = r.u32();
    const std::uint32_t count = r.u32();
    corpus.sessions.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t len = r.u32();
        require(len <= r.remaining() / 4, ErrorKind::kIo, name + ": truncated session");
        Session s(len);
        for (auto& id : s) {
            id = r.u32();
            require(id < vocab, ErrorKind::kIo, name + ": item id out of range");
        }
        corpus.sessions.push_back(std::move(s));
    }
    for (std::uint32_t i = 0; i < vocab; ++i) {
        const auto tok = r.str();
        require(corpus.vocab.add(tok) == i, ErrorKind::kIo, name + ": duplicate token '" + tok + "'");
    }
    require(r.remaining() == 0, ErrorKind::kIo, name + ": trailing bytes");
    return corpus;
}

inline void save_corpus(const SessionCorpus& corpus, const std::filesystem::path& path) {
    io::write_file_atomic(path, encode_corpus(corpus));
}

inline SessionCorpus load_corpus(const std::filesystem::path& path) {
    return decode_corpus(io::read_file(path), path.string());
}

}  // namespace qsrec

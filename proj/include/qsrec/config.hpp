#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "qsrec/data.hpp"
#include "qsrec/error.hpp"
#include "qsrec/match_index.hpp"
#include "qsrec/model.hpp"
#include "qsrec/training.hpp"

namespace qsrec {

enum class SplitMethod { kLastDay, kBuckets };

inline SplitMethod parse_split_method(const std::string& name) {
    if (name == "last_day") return SplitMethod::kLastDay;
    if (name == "buckets") return SplitMethod::kBuckets;
    fail(ErrorKind::kInput, "unknown split '" + name + "' (expected last_day or buckets)");
}

/// Hyperparameters and pipeline settings read from `key = value` text.
struct RunConfig {
    std::string head = "matrix";
    std::size_t input_dim = 32;
    std::size_t hidden = 64;  // vector and fc heads
    std::size_t n = 32;       // fc dense width and matrix item dimension
    double learning_rate = 0.002;
    std::size_t batch_size = 256;
    double dropout_keep_vector = 0.8;
    double dropout_keep_fc = 0.8;
    double dropout_keep_matrix = 0.5;
    std::size_t epochs = 10;
    std::uint64_t seed = 42;
    unsigned precision = 32;

    std::string format = "click_csv";
    std::string split = "last_day";
    double fraction = 1.0;
    std::size_t min_session_len = 2;
    std::size_t min_item_support = 5;

    std::string index_kind = "flatten";
    std::size_t k = 1;   // eigendirections
    std::size_t N = 20;  // candidates returned by a query
    std::size_t K = 20;  // metric cutoff
    std::size_t log_every = 1;

    /// Sets one key; throws input-error on unknown keys or bad values.
    void set(const std::string& key, const std::string& value);

    /// Checks value ranges and cross-field consistency.
    void validate() const {
        parse_head(head);
        parse_input_format(format);
        parse_split_method(split);
        parse_index_kind(index_kind);
        require(precision == 32 || precision == 64, ErrorKind::kInput, "precision must be 32 or 64");
        require(fraction > 0.0 && fraction <= 1.0, ErrorKind::kInput, "fraction must be in (0, 1]");
        require(min_session_len >= 2, ErrorKind::kInput, "min_session_len must be >= 2");
        require(k >= 1 && N >= 1 && K >= 1 && log_every >= 1, ErrorKind::kInput, "k, N, K and log_every must be >= 1");
        for (double keep : {dropout_keep_vector, dropout_keep_fc, dropout_keep_matrix}) {
            require(keep > 0.0 && keep <= 1.0, ErrorKind::kInput, "dropout keep probabilities must be in (0, 1]");
        }
        train_config().validate();
    }

    [[nodiscard]] Head head_kind() const { return parse_head(head); }

    [[nodiscard]] ModelShape shape(std::size_t vocab) const {
        switch (head_kind()) {
            case Head::kVector:
                return ModelShape::vector(vocab, input_dim, hidden);
            case Head::kFc:
                return ModelShape::fc(vocab, input_dim, hidden, n);
            case Head::kMatrix:
                break;
        }
        return ModelShape::matrix(vocab, input_dim, n);
    }

    [[nodiscard]] TrainConfig train_config() const {
        TrainConfig c;
        c.learning_rate = learning_rate;
        c.batch_size = batch_size;
        c.epochs = epochs;
        c.seed = seed;
        switch (parse_head(head)) {
            case Head::kVector:
                c.dropout_keep = dropout_keep_vector;
                break;
            case Head::kFc:
                c.dropout_keep = dropout_keep_fc;
                break;
            case Head::kMatrix:
                c.dropout_keep = dropout_keep_matrix;
                break;
        }
        return c;
    }

    [[nodiscard]] FilterOptions filter_options() const { return {min_session_len, min_item_support}; }

    /// Canonical `key = value` dump, readable by parse_config.
    [[nodiscard]] std::string to_text() const;
};

namespace detail {

template <class V>
V parse_number(const std::string& key, const std::string& text) {
    V v{};
    const char* first = text.data();
    const char* last = first + text.size();
    const auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last) {
        fail(ErrorKind::kInput, "config: bad value for " + key + ": '" + text + "'");
    }
    return v;
}

struct ConfigField {
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <class V>
ConfigField number_field(V RunConfig::*member) {
    return {[member](RunConfig& c, const std::string& k, const std::string& v) { c.*member = parse_number<V>(k, v); },
            [member](const RunConfig& c) {
                char buf[64];
                const auto res = std::to_chars(buf, buf + sizeof(buf), c.*member);
                return std::string(buf, res.ptr);
            }};
}

inline ConfigField string_field(std::string RunConfig::*member) {
    return {[member](RunConfig& c, const std::string&, const std::string& v) { c.*member = v; },
            [member](const RunConfig& c) { return c.*member; }};
}

inline const std::map<std::string, ConfigField>& config_fields() {
    static const std::map<std::string, ConfigField> fields = {
        {"head", string_field(&RunConfig::head)},
        {"input_dim", number_field(&RunConfig::input_dim)},
        {"hidden", number_field(&RunConfig::hidden)},
        {"n", number_field(&RunConfig::n)},
        {"learning_rate", number_field(&RunConfig::learning_rate)},
        {"batch_size", number_field(&RunConfig::batch_size)},
        {"dropout_keep_vector", number_field(&RunConfig::dropout_keep_vector)},
        {"dropout_keep_fc", number_field(&RunConfig::dropout_keep_fc)},
        {"dropout_keep_matrix", number_field(&RunConfig::dropout_keep_matrix)},
        {"epochs", number_field(&RunConfig::epochs)},
        {"seed", number_field(&RunConfig::seed)},
        {"precision", number_field(&RunConfig::precision)},
        {"format", string_field(&RunConfig::format)},
        {"split", string_field(&RunConfig::split)},
        {"fraction", number_field(&RunConfig::fraction)},
        {"min_session_len", number_field(&RunConfig::min_session_len)},
        {"min_item_support", number_field(&RunConfig::min_item_support)},
        {"index_kind", string_field(&RunConfig::index_kind)},
        {"k", number_field(&RunConfig::k)},
        {"N", number_field(&RunConfig::N)},
        {"K", number_field(&RunConfig::K)},
        {"log_every", number_field(&RunConfig::log_every)},
    };
    return fields;
}

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
    const auto& fields = detail::config_fields();
    const auto it = fields.find(key);
    require(it != fields.end(), ErrorKind::kInput, "config: unknown key '" + key + "'");
    it->second.set(*this, key, value);
}

inline std::string RunConfig::to_text() const {
    std::string out;
    for (const auto& [key, field] : detail::config_fields()) {
        out += key + " = " + field.get(*this) + "\n";
    }
    return out;
}

/// Applies a `key=value` assignment (as given to --set).
inline void apply_assignment(RunConfig& cfg, std::string_view line, const std::string& where = "override") {
    const auto eq = line.find('=');
    require(eq != std::string_view::npos, ErrorKind::kInput, where + ": expected key=value, got '" + std::string(line) + "'");
    const std::string key = std::string(detail::trim(line.substr(0, eq)));
    const std::string value = std::string(detail::trim(line.substr(eq + 1)));
    require(!key.empty(), ErrorKind::kInput, where + ": empty key");
    cfg.set(key, value);
}

/// Reads `key = value` lines on top of the defaults; `#` starts a comment.
inline RunConfig parse_config(std::istream& in, const std::string& name = "config") {
    RunConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        if (detail::trim(line).empty()) continue;
        apply_assignment(cfg, line, name + ":" + std::to_string(lineno));
    }
    try {
        cfg.validate();
    } catch (const Error& e) {
        fail(ErrorKind::kInput, name + ": " + e.what());
    }
    return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::kIo, "cannot open config " + path.string());
    return parse_config(in, path.string());
}

}  // namespace qsrec

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "qsrec/data.hpp"
#include "qsrec/error.hpp"
#include "qsrec/match_index.hpp"
#include "qsrec/model.hpp"

namespace qsrec {

/// Rank used for targets that fall outside a truncated candidate list.
inline constexpr std::size_t kUnranked = std::numeric_limits<std::size_t>::max();

struct EvalReport {
    std::string model;
    std::size_t k = 20;
    double recall = 0.0;
    double mrr = 0.0;
    std::size_t events = 0;

    friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// 1-based rank of `target`; tied competitors are placed ahead of it.
inline std::size_t target_rank(std::span<const double> scores, std::uint32_t target) {
    require(target < scores.size(), ErrorKind::kInput, "target id outside score vector");
    const double t = scores[target];
    std::size_t ahead = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (i != target && scores[i] >= t) ++ahead;
    }
    return ahead + 1;
}

/// Same rule applied to a (possibly truncated) ranked list.
inline std::size_t target_rank(const TopN& list, std::uint32_t target) {
    const auto it = std::find_if(list.begin(), list.end(), [&](const ScoredItem& s) { return s.id == target; });
    if (it == list.end()) return kUnranked;
    std::size_t ahead = 0;
    for (const auto& s : list) {
        if (s.id != target && s.score >= it->score) ++ahead;
    }
    return ahead + 1;
}

/// recall@K and MRR@K over a sequence of target ranks.
class MetricAccumulator {
   public:
    explicit MetricAccumulator(std::size_t k) : k_(k) { require(k >= 1, ErrorKind::kInput, "K must be >= 1"); }

    void add(std::size_t rank) {
        ++events_;
        if (rank <= k_) {
            ++hits_;
            reciprocal_sum_ += 1.0 / static_cast<double>(rank);
        }
    }

    [[nodiscard]] EvalReport report(std::string model) const {
        EvalReport r{std::move(model), k_, 0.0, 0.0, events_};
        if (events_ > 0) {
            r.recall = static_cast<double>(hits_) / static_cast<double>(events_);
            r.mrr = reciprocal_sum_ / static_cast<double>(events_);
        }
        return r;
    }

   private:
    std::size_t k_;
    std::size_t events_ = 0;
    std::size_t hits_ = 0;
    double reciprocal_sum_ = 0.0;
};

/// Worker count: QS_THREADS if set, else hardware concurrency.
inline std::size_t worker_threads() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("QS_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(v));
    }
    return n;
}

namespace detail {

// Runs fn(session_index) over all sessions and concatenates the per-session
// rank lists in session order, so results do not depend on the thread count.
inline std::vector<std::size_t> parallel_ranks(std::size_t sessions,
                                               const std::function<std::vector<std::size_t>(std::size_t)>& fn,
                                               std::size_t threads) {
    std::vector<std::vector<std::size_t>> per(sessions);
    threads = std::max<std::size_t>(1, std::min(threads, sessions));
    if (threads == 1) {
        for (std::size_t i = 0; i < sessions; ++i) per[i] = fn(i);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(threads);
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&, t] {
                try {
                    for (std::size_t i = t; i < sessions; i += threads) per[i] = fn(i);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }
    std::vector<std::size_t> ranks;
    for (auto& p : per) ranks.insert(ranks.end(), p.begin(), p.end());
    return ranks;
}

// Walks one session, calling rank_of(hidden, target) for each pair.
template <class T, class RankFn>
std::vector<std::size_t> walk_session(const Model<T>& model, const Session& session, RankFn&& rank_of) {
    std::vector<std::size_t> ranks;
    std::vector<T> h(model.shape().hidden, T(0));
    std::vector<T> next(h.size());
    for (std::size_t t = 0; t + 1 < session.size(); ++t) {
        require(session[t] < model.shape().vocab && session[t + 1] < model.shape().vocab, ErrorKind::kInput,
                "test item id outside model vocabulary");
        gru_step(model.gru, model.embeddings.trigger.row(session[t]), std::span<const T>(h), std::span<T>(next));
        h.swap(next);
        ranks.push_back(rank_of(std::span<const T>(h), session[t + 1]));
    }
    return ranks;
}

}  // namespace detail

/// Next-item protocol: hidden state carried within a test session and reset
/// between sessions; every item is scored for every event.
template <class T>
EvalReport evaluate(const Model<T>& model, const SessionCorpus& test, std::size_t k = 20,
                    std::size_t threads = worker_threads()) {
    require(!test.sessions.empty(), ErrorKind::kInput, "evaluate: empty test corpus");
    const ItemScorer<T> scorer(model);
    const auto ranks = detail::parallel_ranks(
        test.sessions.size(),
        [&](std::size_t i) {
            return detail::walk_session(model, test.sessions[i], [&](std::span<const T> h, std::uint32_t target) {
                const auto rep = session_embedding(model, h);
                const auto scores = scorer.score_all(std::span<const T>(rep));
                return target_rank(std::span<const double>(scores), target);
            });
        },
        threads);
    MetricAccumulator acc(k);
    for (std::size_t r : ranks) acc.add(r);
    return acc.report(head_name(model.shape().head));
}

struct IndexEvalOptions {
    /// Eigendirections for decomposition indexes.
    std::size_t directions = 1;
    /// Final list length for decomposition queries (and per-direction
    /// candidate count); raised to K when smaller.
    std::size_t candidates = 0;
    DecompositionOptions decomposition;
};

/// Same protocol, with each event's candidates coming from a match index.
/// Throws consistency-error when the index was not built from `model`.
template <class T>
EvalReport evaluate_via_index(const IndexFile& index, const Model<T>& model, const SessionCorpus& test,
                              std::size_t k = 20, const IndexEvalOptions& opts = {},
                              std::size_t threads = worker_threads()) {
    require(!test.sessions.empty(), ErrorKind::kInput, "evaluate_via_index: empty test corpus");
    const ItemMatrix current = item_matrix_from_model(model);
    if (fingerprint(current) != fingerprint(index.items) || !(current == index.items)) {
        fail(ErrorKind::kConsistency, "index does not match the model's item embeddings (stale index?)");
    }
    const std::size_t n_items = index.items.rows();
    std::optional<FlattenIndex<>> flat;
    std::optional<DecompositionIndex> decomp;
    if (index.kind == IndexKind::kFlatten) {
        flat = FlattenIndex<>::build(index.items);
    } else {
        decomp.emplace(index.items);
    }
    const std::size_t dim = index.items.dim;
    const std::size_t list_len = std::max(k, opts.candidates);

    const auto ranks = detail::parallel_ranks(
        test.sessions.size(),
        [&](std::size_t i) {
            return detail::walk_session(model, test.sessions[i], [&](std::span<const T> h, std::uint32_t target) {
                const auto a = reshape_to_symmetric(h, dim);
                if (flat) {
                    // Grow the list until ties with the target's score are fully visible.
                    std::size_t n = std::min(k, n_items);
                    while (true) {
                        const TopN list = query_flatten(*flat, a, n);
                        const auto pos = std::find_if(list.begin(), list.end(),
                                                      [&](const ScoredItem& s) { return s.id == target; });
                        // Absent: at least n >= K items score at or above the target.
                        if (pos == list.end()) return kUnranked;
                        if (n >= n_items || list.back().score < pos->score) return target_rank(list, target);
                        n = std::min(n_items, 2 * n);
                    }
                }
                const TopN list = query_decomposition(*decomp, a, opts.directions, list_len, opts.decomposition);
                return target_rank(list, target);
            });
        },
        threads);
    MetricAccumulator acc(k);
    for (std::size_t r : ranks) acc.add(r);
    return acc.report(std::string(head_name(model.shape().head)) + "+" + index_kind_name(index.kind));
}

inline std::string format_report_tsv(const EvalReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s\t%zu\t%.6f\t%.6f\t%zu\n", r.model.c_str(), r.k, r.recall, r.mrr, r.events);
    return buf;
}

inline std::string format_report_text(const EvalReport& r) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "model:      %s\n"
                  "events:     %zu\n"
                  "recall@%-3zu %.6f\n"
                  "mrr@%-3zu    %.6f\n",
                  r.model.c_str(), r.events, r.k, r.recall, r.k, r.mrr);
    return buf;
}

}  // namespace qsrec

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "qsrec/binary_io.hpp"
#include "qsrec/error.hpp"
#include "qsrec/model.hpp"
#include "qsrec/symmat.hpp"

namespace qsrec {

struct ScoredItem {
    std::uint32_t id = 0;
    double score = 0.0;

    friend bool operator==(const ScoredItem&, const ScoredItem&) = default;
};

/// Descending by score, ascending id among ties.
using TopN = std::vector<ScoredItem>;

inline bool ranks_before(const ScoredItem& a, const ScoredItem& b) {
    return a.score > b.score || (a.score == b.score && a.id < b.id);
}

/// Keeps the best `n` entries of `items` in rank order.
inline TopN select_top_n(std::vector<ScoredItem> items, std::size_t n) {
    if (items.size() > n) {
        std::nth_element(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(n), items.end(), ranks_before);
        items.resize(n);
    }
    std::sort(items.begin(), items.end(), ranks_before);
    return items;
}

/// Embedded item vectors (rows in the upper half space) with their ids.
/// Stored as float, matching the index file; scoring promotes to double.
struct ItemMatrix {
    std::size_t dim = 0;
    std::vector<float> values;
    std::vector<std::uint32_t> ids;

    [[nodiscard]] std::size_t rows() const noexcept { return ids.size(); }
    [[nodiscard]] std::span<const float> row(std::size_t i) const { return {values.data() + i * dim, dim}; }

    void validate() const {
        require(dim > 0, ErrorKind::kShape, "item matrix dimension must be positive");
        require(values.size() == ids.size() * dim, ErrorKind::kShape, "item matrix row count != id count");
        for (std::size_t i = 0; i < rows(); ++i) {
            require(row(i).back() > 0.0f, ErrorKind::kInput,
                    "item " + std::to_string(ids[i]) + " is not in the upper half space");
        }
    }

    friend bool operator==(const ItemMatrix&, const ItemMatrix&) = default;
};

/// Half-plane embeds every output row of a matrix-head model.
template <class T>
ItemMatrix item_matrix_from_model(const Model<T>& model) {
    const ModelShape& s = model.shape();
    require(s.head == Head::kMatrix, ErrorKind::kInput, "match indexes are built from matrix-head models");
    ItemMatrix items;
    items.dim = s.n;
    items.values.resize(s.vocab * s.n);
    items.ids.resize(s.vocab);
    std::vector<T> y(s.n);
    for (std::size_t i = 0; i < s.vocab; ++i) {
        half_plane_embed(model.embeddings.output.row(i), std::span<T>(y));
        for (std::size_t k = 0; k < s.n; ++k) items.values[i * s.n + k] = static_cast<float>(y[k]);
        items.ids[i] = static_cast<std::uint32_t>(i);
    }
    return items;
}

inline std::uint32_t fingerprint(const ItemMatrix& items) {
    io::Writer w;
    w.u32(static_cast<std::uint32_t>(items.dim));
    w.bytes(items.values.data(), items.values.size() * sizeof(float));
    w.bytes(items.ids.data(), items.ids.size() * sizeof(std::uint32_t));
    return io::crc32_of(w.buffer().data(), w.buffer().size());
}

/// Brute-force top N by y^T A y.
inline TopN exact_top_n(const PackedSymMatrix& a, const ItemMatrix& items, std::size_t n) {
    require(n > 0, ErrorKind::kInput, "N must be positive");
    require(a.dim() == items.dim, ErrorKind::kShape, "session matrix and item dimensions differ");
    std::vector<ScoredItem> scored(items.rows());
    for (std::size_t i = 0; i < items.rows(); ++i) {
        scored[i] = {items.ids[i], quadratic_form(a, items.row(i))};
    }
    return select_top_n(std::move(scored), n);
}

// ---------------------------------------------------------------------------
// Inner-product search backends

/// A backend is built once over fixed labelled vectors and answers top-N
/// maximum-inner-product queries, exactly or approximately.
template <class B>
concept InnerProductBackend =
    std::default_initializable<B> && requires(const B b, std::vector<double> vectors, std::size_t dim,
                                              std::vector<std::uint32_t> labels, std::span<const double> query,
                                              std::size_t n) {
    { B(std::move(vectors), dim, std::move(labels)) };
    { b.search(query, n) } -> std::same_as<TopN>;
    { b.size() } -> std::convertible_to<std::size_t>;
};

/// Exact linear scan.
class ExactScanBackend {
   public:
    ExactScanBackend() = default;
    ExactScanBackend(std::vector<double> vectors, std::size_t dim, std::vector<std::uint32_t> labels)
        : vectors_(std::move(vectors)), dim_(dim), labels_(std::move(labels)) {
        require(dim_ > 0 && vectors_.size() == dim_ * labels_.size(), ErrorKind::kShape, "backend: bad vector block");
    }

    [[nodiscard]] TopN search(std::span<const double> query, std::size_t n) const {
        require(query.size() == dim_, ErrorKind::kShape, "backend: query dimension mismatch");
        std::vector<ScoredItem> scored(labels_.size());
        for (std::size_t i = 0; i < labels_.size(); ++i) {
            scored[i] = {labels_[i], dot(query, std::span<const double>(vectors_.data() + i * dim_, dim_))};
        }
        return select_top_n(std::move(scored), n);
    }

    [[nodiscard]] std::size_t size() const noexcept { return labels_.size(); }

    friend bool operator==(const ExactScanBackend&, const ExactScanBackend&) = default;

   private:
    std::vector<double> vectors_;
    std::size_t dim_ = 0;
    std::vector<std::uint32_t> labels_;
};

static_assert(InnerProductBackend<ExactScanBackend>);

// ---------------------------------------------------------------------------
// Flatten

/// Index over gamma2(x) so that y^T A y becomes <gamma1(A), gamma2(x)>.
template <InnerProductBackend Backend = ExactScanBackend>
class FlattenIndex {
   public:
    FlattenIndex() = default;

    static FlattenIndex build(ItemMatrix items) {
        items.validate();
        FlattenIndex index;
        const std::size_t m = packed_size(items.dim);
        index.gamma_rows_.resize(items.rows() * m);
        for (std::size_t i = 0; i < items.rows(); ++i) {
            gamma2_into(items.row(i), std::span<double>(index.gamma_rows_.data() + i * m, m));
        }
        index.backend_ = Backend(index.gamma_rows_, m, items.ids);
        index.items_ = std::move(items);
        return index;
    }

    [[nodiscard]] const ItemMatrix& items() const noexcept { return items_; }
    [[nodiscard]] std::size_t dim() const noexcept { return items_.dim; }
    [[nodiscard]] std::size_t size() const noexcept { return items_.rows(); }
    [[nodiscard]] std::span<const double> gamma_row(std::size_t i) const {
        const std::size_t m = packed_size(items_.dim);
        return {gamma_rows_.data() + i * m, m};
    }
    [[nodiscard]] const Backend& backend() const noexcept { return backend_; }

    friend bool operator==(const FlattenIndex& a, const FlattenIndex& b) {
        return a.items_ == b.items_ && a.gamma_rows_ == b.gamma_rows_;
    }

   private:
    ItemMatrix items_;
    std::vector<double> gamma_rows_;
    Backend backend_;
};

template <InnerProductBackend Backend>
TopN query_flatten(const FlattenIndex<Backend>& index, const PackedSymMatrix& a, std::size_t n) {
    require(n > 0, ErrorKind::kInput, "N must be positive");
    require(a.dim() == index.dim(), ErrorKind::kShape, "query_flatten: session dim != index dim");
    const auto q = gamma1(a);
    return index.backend().search(q, n);
}

// ---------------------------------------------------------------------------
// Decomposition

/// How items are ordered along one eigendirection during candidate
/// generation.
enum class DirectionRanking {
    kContribution,  // lambda_i * <alpha_i, x>^2, the direction's share of the score
    kAbsolute,      // |<alpha_i, x>|
    kSigned,        // <alpha_i, x>
};

struct DecompositionOptions {
    DirectionRanking ranking = DirectionRanking::kContribution;
    /// Ignore directions whose eigenvalue is <= 0.
    bool skip_nonpositive = false;
    /// Each direction contributes N items not picked by earlier directions,
    /// so k directions yield min(kN, V) candidates.
    bool disjoint = true;
};

class DecompositionIndex {
   public:
    DecompositionIndex() = default;
    explicit DecompositionIndex(ItemMatrix items) : items_(std::move(items)) {
        items_.validate();
        row_of_.reserve(items_.rows());
        for (std::size_t i = 0; i < items_.rows(); ++i) {
            require(row_of_.emplace(items_.ids[i], i).second, ErrorKind::kInput, "duplicate item id");
        }
    }

    [[nodiscard]] const ItemMatrix& items() const noexcept { return items_; }
    [[nodiscard]] std::size_t dim() const noexcept { return items_.dim; }
    [[nodiscard]] std::size_t size() const noexcept { return items_.rows(); }
    [[nodiscard]] std::size_t row_of(std::uint32_t id) const { return row_of_.at(id); }

    friend bool operator==(const DecompositionIndex& a, const DecompositionIndex& b) { return a.items_ == b.items_; }

   private:
    ItemMatrix items_;
    std::unordered_map<std::uint32_t, std::size_t> row_of_;
};

/// Candidate ids generated from the leading k eigendirections, in pick order.
inline std::vector<std::uint32_t> decomposition_candidates(const DecompositionIndex& index,
                                                           const EigenDecomposition& eig, std::size_t k,
                                                           std::size_t n, const DecompositionOptions& opts = {}) {
    const ItemMatrix& items = index.items();
    require(eig.dim == items.dim, ErrorKind::kShape, "decomposition: session dim != index dim");
    require(k >= 1 && k <= items.dim, ErrorKind::kInput,
            "k must be in [1, " + std::to_string(items.dim) + "], got " + std::to_string(k));
    require(n > 0, ErrorKind::kInput, "N must be positive");

    std::vector<std::uint32_t> picked;
    std::vector<char> taken(items.rows(), 0);
    std::vector<ScoredItem> keyed;
    for (std::size_t dir = 0; dir < k; ++dir) {
        const double lambda = eig.eigenvalues[dir];
        if (opts.skip_nonpositive && lambda <= 0.0) continue;
        const auto alpha = eig.vector(dir);
        keyed.clear();
        for (std::size_t i = 0; i < items.rows(); ++i) {
            if (opts.disjoint && taken[i]) continue;
            const double proj = dot(alpha, items.row(i));
            double key = proj;
            switch (opts.ranking) {
                case DirectionRanking::kContribution: key = lambda * proj * proj; break;
                case DirectionRanking::kAbsolute: key = std::abs(proj); break;
                case DirectionRanking::kSigned: break;
            }
            keyed.push_back({items.ids[i], key});
        }
        for (const auto& hit : select_top_n(std::move(keyed), n)) {
            const std::size_t row = index.row_of(hit.id);
            if (!taken[row]) {
                taken[row] = 1;
                picked.push_back(hit.id);
            }
        }
        keyed = {};
    }
    return picked;
}

/// Top N over the decomposition candidates, rescored exactly by y^T A y.
inline TopN query_decomposition(const DecompositionIndex& index, const PackedSymMatrix& a,
                                const EigenDecomposition& eig, std::size_t k, std::size_t n,
                                const DecompositionOptions& opts = {}) {
    require(a.dim() == index.dim(), ErrorKind::kShape, "query_decomposition: session dim != index dim");
    const auto candidates = decomposition_candidates(index, eig, k, n, opts);
    const ItemMatrix& items = index.items();
    std::vector<ScoredItem> scored;
    scored.reserve(candidates.size());
    for (std::uint32_t id : candidates) scored.push_back({id, quadratic_form(a, items.row(index.row_of(id)))});
    return select_top_n(std::move(scored), n);
}

inline TopN query_decomposition(const DecompositionIndex& index, const PackedSymMatrix& a, std::size_t k,
                                std::size_t n, const DecompositionOptions& opts = {}) {
    return query_decomposition(index, a, eigendecompose(a), k, n, opts);
}

/// |result ∩ reference| / |reference|.
inline double overlap_recall(const TopN& result, const TopN& reference) {
    if (reference.empty()) return 1.0;
    std::unordered_set<std::uint32_t> ref;
    for (const auto& r : reference) ref.insert(r.id);
    std::size_t hit = 0;
    for (const auto& r : result) hit += ref.count(r.id);
    return static_cast<double>(hit) / static_cast<double>(reference.size());
}

// ---------------------------------------------------------------------------
// Index files: magic "QSIDX1", u8 kind, u32 V, u32 n, V*n f32 item rows,
// V u32 ids. Flatten indexes recompute gamma2 on load.

enum class IndexKind : std::uint8_t { kFlatten = 1, kDecomposition = 2 };

inline IndexKind parse_index_kind(const std::string& name) {
    if (name == "flatten") return IndexKind::kFlatten;
    if (name == "decomp" || name == "decomposition") return IndexKind::kDecomposition;
    fail(ErrorKind::kInput, "unknown index kind '" + name + "' (expected flatten or decomp)");
}

inline const char* index_kind_name(IndexKind kind) {
    return kind == IndexKind::kFlatten ? "flatten" : "decomp";
}

inline constexpr std::string_view kIndexMagic = "QSIDX1";

struct IndexFile {
    IndexKind kind = IndexKind::kFlatten;
    ItemMatrix items;

    friend bool operator==(const IndexFile&, const IndexFile&) = default;
};

inline std::vector<std::uint8_t> encode_index(const IndexFile& file) {
    file.items.validate();
    io::Writer w;
    w.magic(kIndexMagic);
    w.u8(static_cast<std::uint8_t>(file.kind));
    w.u32(static_cast<std::uint32_t>(file.items.rows()));
    w.u32(static_cast<std::uint32_t>(file.items.dim));
    for (float v : file.items.values) w.f32(v);
    for (std::uint32_t id : file.items.ids) w.u32(id);
    return std::move(w.buffer());
}

inline IndexFile decode_index(const std::vector<std::uint8_t>& bytes, const std::string& name = "index") {
    io::Reader r(bytes, name);
    r.expect_magic(kIndexMagic);
    IndexFile file;
    const std::uint8_t kind = r.u8();
    require(kind == 1 || kind == 2, ErrorKind::kIo, name + ": unknown index kind " + std::to_string(kind));
    file.kind = static_cast<IndexKind>(kind);
    const std::uint32_t v = r.u32();
    const std::uint32_t n = r.u32();
    require(n > 0, ErrorKind::kIo, name + ": zero dimension");
    require(static_cast<std::uint64_t>(v) * (n + 1) * 4 == r.remaining(), ErrorKind::kIo, name + ": size mismatch");
    file.items.dim = n;
    file.items.values.resize(static_cast<std::size_t>(v) * n);
    for (auto& x : file.items.values) x = r.f32();
    file.items.ids.resize(v);
    for (auto& id : file.items.ids) id = r.u32();
    try {
        file.items.validate();
    } catch (const Error& e) {
        fail(ErrorKind::kIo, name + ": corrupt index (" + e.what() + ")");
    }
    return file;
}

inline void save_index(const IndexFile& file, const std::filesystem::path& path) {
    io::write_file_atomic(path, encode_index(file));
}

inline IndexFile load_index(const std::filesystem::path& path) {
    return decode_index(io::read_file(path), path.string());
}

}  // namespace qsrec

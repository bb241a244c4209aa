#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "qsrec/error.hpp"
#include "qsrec/symmat.hpp"
#include "qsrec/tensor.hpp"

namespace qsrec {

/// How the GRU output becomes a session representation and how items are
/// scored against it.
///  - kVector: extension by 1, score = <h, w_i> + b_i.
///  - kFc: dense expansion h -> n(n+1)/2, score = <s, w_i> + b_i.
///  - kMatrix: reshape h (width n(n+1)/2) to a symmetric A, score = y^T A y
///    with y the half-plane embedding of the item row.
enum class Head : std::uint8_t { kVector = 1, kFc = 2, kMatrix = 3 };

inline const char* head_name(Head head) {
    switch (head) {
        case Head::kVector: return "vector";
        case Head::kFc: return "fc";
        case Head::kMatrix: return "matrix";
    }
    return "?";
}

inline Head parse_head(const std::string& name) {
    if (name == "vector") return Head::kVector;
    if (name == "fc") return Head::kFc;
    if (name == "matrix") return Head::kMatrix;
    fail(ErrorKind::kInput, "unknown head '" + name + "' (expected vector, fc or matrix)");
}

struct ModelShape {
    Head head = Head::kMatrix;
    std::size_t vocab = 0;
    std::size_t input_dim = 0;
    std::size_t hidden = 0;
    /// Item embedding dimension of the matrix head; the FC head expands to
    /// n(n+1)/2. Unused by the vector head.
    std::size_t n = 0;

    static ModelShape vector(std::size_t vocab, std::size_t input_dim, std::size_t hidden) {
        return {Head::kVector, vocab, input_dim, hidden, hidden};
    }
    static ModelShape fc(std::size_t vocab, std::size_t input_dim, std::size_t hidden, std::size_t n) {
        return {Head::kFc, vocab, input_dim, hidden, n};
    }
    static ModelShape matrix(std::size_t vocab, std::size_t input_dim, std::size_t n) {
        return {Head::kMatrix, vocab, input_dim, packed_size(n), n};
    }

    /// Width of the session representation fed to the score layer (the
    /// vector head's implicit trailing 1 is not counted).
    [[nodiscard]] std::size_t session_width() const { return head == Head::kVector ? hidden : packed_size(n); }
    [[nodiscard]] std::size_t output_width() const { return head == Head::kMatrix ? n : session_width(); }
    [[nodiscard]] bool has_output_bias() const { return head != Head::kMatrix; }
    [[nodiscard]] bool has_dense() const { return head == Head::kFc; }

    void validate() const {
        require(vocab > 0 && input_dim > 0 && hidden > 0 && n > 0, ErrorKind::kShape, "model dimensions must be positive");
        if (head == Head::kMatrix) {
            require(hidden == packed_size(n), ErrorKind::kShape,
                    "matrix head requires hidden == n(n+1)/2 (" + std::to_string(packed_size(n)) + ")");
        }
        if (head == Head::kVector) {
            require(n == hidden, ErrorKind::kShape, "vector head: n must equal hidden");
        }
    }

    friend bool operator==(const ModelShape&, const ModelShape&) = default;
};

struct ParamSpec {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t count = 0;
};

/// Parameter tensors of `shape` in the order used by checkpoints and by the
/// `inspect` table.
inline std::vector<ParamSpec> parameter_inventory(const ModelShape& shape) {
    shape.validate();
    const std::size_t v = shape.vocab;
    const std::size_t d = shape.input_dim;
    const std::size_t h = shape.hidden;
    std::vector<ParamSpec> specs;
    auto add = [&](std::string name, std::vector<std::size_t> dims) {
        const std::size_t count = Tensor<float>::element_count(dims);
        specs.push_back({std::move(name), std::move(dims), count});
    };
    add("input_embedding", {v, d});
    add("softmax_W", {v, shape.output_width()});
    if (shape.has_output_bias()) {
        add("softmax_b", {v});
    }
    if (shape.has_dense()) {
        add("gru_cell/dense/kernel", {h, packed_size(shape.n)});
        add("gru_cell/dense/bias", {packed_size(shape.n)});
    }
    add("gru_cell/gates/kernel", {d + h, 2 * h});
    add("gru_cell/gates/bias", {2 * h});
    add("gru_cell/candidate/kernel", {d + h, h});
    add("gru_cell/candidate/bias", {h});
    return specs;
}

inline std::size_t parameter_count(const ModelShape& shape) {
    std::size_t total = 0;
    for (const auto& spec : parameter_inventory(shape)) {
        total += spec.count;
    }
    return total;
}

/// Input-side ("trigger") and output-side ("item") embeddings.
template <class T>
struct EmbeddingTable {
    Tensor<T> trigger;      // V x d_in
    Tensor<T> output;       // V x d_out
    Tensor<T> output_bias;  // V, empty for the matrix head
};

template <class T>
struct GruParams {
    Tensor<T> gates_kernel;      // (d_in + h) x 2h, columns [update | reset]
    Tensor<T> gates_bias;        // 2h
    Tensor<T> candidate_kernel;  // (d_in + h) x h
    Tensor<T> candidate_bias;    // h

    [[nodiscard]] std::size_t hidden() const { return candidate_bias.size(); }
    [[nodiscard]] std::size_t input_dim() const { return candidate_kernel.rows() - hidden(); }
};

template <class T>
struct DenseLayer {
    Tensor<T> kernel;  // h x n(n+1)/2
    Tensor<T> bias;    // n(n+1)/2
};

template <class T>
class Model {
   public:
    using scalar_type = T;

    Model() = default;

    /// All-zero parameters of the given shape.
    explicit Model(const ModelShape& shape) : shape_(shape) {
        for (const auto& spec : parameter_inventory(shape)) {
            *tensor_by_name(spec.name) = Tensor<T>(spec.shape);
        }
    }

    /// Glorot-uniform kernels, uniform(-0.05, 0.05) embeddings, zero biases.
    static Model initialized(const ModelShape& shape, std::uint64_t seed) {
        Model model(shape);
        std::mt19937_64 rng(seed);
        auto fill_uniform = [&rng](Tensor<T>& t, double bound) {
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (auto& x : t.data()) {
                x = static_cast<T>(dist(rng));
            }
        };
        auto glorot = [](const Tensor<T>& t) { return std::sqrt(6.0 / static_cast<double>(t.rows() + t.cols())); };
        model.for_each_parameter([&](const std::string& name, Tensor<T>& t) {
            if (name == "input_embedding" || name == "softmax_W") {
                fill_uniform(t, 0.05);
            } else if (t.rank() == 2) {
                fill_uniform(t, glorot(t));
            }
        });
        return model;
    }

    [[nodiscard]] const ModelShape& shape() const noexcept { return shape_; }

    EmbeddingTable<T> embeddings;
    GruParams<T> gru;
    DenseLayer<T> dense;

    /// Visits every present parameter tensor in inventory order.
    template <class F>
    void for_each_parameter(F&& f) {
        for (const auto& spec : parameter_inventory(shape_)) {
            f(spec.name, *lookup(*this, spec.name));
        }
    }
    template <class F>
    void for_each_parameter(F&& f) const {
        for (const auto& spec : parameter_inventory(shape_)) {
            f(spec.name, *lookup(*this, spec.name));
        }
    }

    Tensor<T>* tensor_by_name(const std::string& name) { return lookup(*this, name); }
    const Tensor<T>* tensor_by_name(const std::string& name) const { return lookup(*this, name); }

    /// Converts every tensor to another scalar type.
    template <class U>
    [[nodiscard]] Model<U> cast() const {
        Model<U> out(shape_);
        for_each_parameter([&](const std::string& name, const Tensor<T>& t) {
            Tensor<U>& dst = *out.tensor_by_name(name);
            for (std::size_t i = 0; i < t.size(); ++i) {
                dst[i] = static_cast<U>(t[i]);
            }
        });
        return out;
    }

    friend bool operator==(const Model& a, const Model& b) {
        if (!(a.shape_ == b.shape_)) {
            return false;
        }
        bool same = true;
        a.for_each_parameter([&](const std::string& name, const Tensor<T>& t) {
            same = same && (t == *b.tensor_by_name(name));
        });
        return same;
    }

   private:
    template <class Self>
    static auto lookup(Self& self, const std::string& name) -> decltype(&self.embeddings.trigger) {
        if (name == "input_embedding") return &self.embeddings.trigger;
        if (name == "softmax_W") return &self.embeddings.output;
        if (name == "softmax_b") return &self.embeddings.output_bias;
        if (name == "gru_cell/dense/kernel") return &self.dense.kernel;
        if (name == "gru_cell/dense/bias") return &self.dense.bias;
        if (name == "gru_cell/gates/kernel") return &self.gru.gates_kernel;
        if (name == "gru_cell/gates/bias") return &self.gru.gates_bias;
        if (name == "gru_cell/candidate/kernel") return &self.gru.candidate_kernel;
        if (name == "gru_cell/candidate/bias") return &self.gru.candidate_bias;
        fail(ErrorKind::kFormat, "unknown parameter tensor '" + name + "'");
    }

    ModelShape shape_;
};

template <class T>
inline T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

/// Intermediate values of one GRU step, kept for the backward pass.
template <class T>
struct GruActivations {
    std::vector<T> update;     // z
    std::vector<T> reset;      // r
    std::vector<T> candidate;  // tanh(...)
};

/// One GRU step:
///   z, r = sigmoid([x; h] Wg + bg)
///   c    = tanh([x; r*h] Wc + bc)
///   h'   = (1 - z) * h + z * c
template <class T>
void gru_step(const GruParams<T>& p, std::span<const T> x, std::span<const T> h, std::span<T> out,
              GruActivations<T>* acts = nullptr) {
    const std::size_t hid = p.hidden();
    const std::size_t din = p.input_dim();
    require(x.size() == din && h.size() == hid && out.size() == hid, ErrorKind::kShape,
            "gru_step: expected input " + std::to_string(din) + " and hidden " + std::to_string(hid));

    std::vector<T> gates(p.gates_bias.data().begin(), p.gates_bias.data().end());
    std::vector<T> cand(p.candidate_bias.data().begin(), p.candidate_bias.data().end());
    for (std::size_t k = 0; k < din; ++k) {
        const T xk = x[k];
        if (xk == T(0)) continue;
        const auto grow = p.gates_kernel.row(k);
        for (std::size_t c = 0; c < 2 * hid; ++c) gates[c] += xk * grow[c];
        const auto crow = p.candidate_kernel.row(k);
        for (std::size_t c = 0; c < hid; ++c) cand[c] += xk * crow[c];
    }
    for (std::size_t k = 0; k < hid; ++k) {
        const T hk = h[k];
        if (hk == T(0)) continue;
        const auto grow = p.gates_kernel.row(din + k);
        for (std::size_t c = 0; c < 2 * hid; ++c) gates[c] += hk * grow[c];
    }
    std::vector<T> z(hid), r(hid);
    for (std::size_t c = 0; c < hid; ++c) {
        z[c] = sigmoid(gates[c]);
        r[c] = sigmoid(gates[hid + c]);
    }
    for (std::size_t k = 0; k < hid; ++k) {
        const T rh = r[k] * h[k];
        if (rh == T(0)) continue;
        const auto crow = p.candidate_kernel.row(din + k);
        for (std::size_t c = 0; c < hid; ++c) cand[c] += rh * crow[c];
    }
    for (std::size_t c = 0; c < hid; ++c) {
        cand[c] = std::tanh(cand[c]);
        out[c] = (T(1) - z[c]) * h[c] + z[c] * cand[c];
    }
    if (acts != nullptr) {
        acts->update = std::move(z);
        acts->reset = std::move(r);
        acts->candidate = std::move(cand);
    }
}

template <class T>
std::vector<T> gru_step(const GruParams<T>& p, std::span<const T> x, std::span<const T> h) {
    std::vector<T> out(p.hidden());
    gru_step(p, x, h, std::span<T>(out));
    return out;
}

/// Pre-exp clamp for the last coordinate of half-plane embeddings.
inline constexpr double kHalfPlaneClamp = 30.0;

/// Maps v into the open upper half space by replacing the last coordinate
/// with exp(v_n); v_n is clamped to [-30, 30] first.
template <class T>
void half_plane_embed(std::span<const T> v, std::span<T> out) {
    require(!v.empty() && out.size() == v.size(), ErrorKind::kShape, "half_plane_embed: size mismatch");
    for (std::size_t i = 0; i < v.size(); ++i) {
        require(std::isfinite(static_cast<double>(v[i])), ErrorKind::kNumeric, "half_plane_embed: non-finite input");
        out[i] = v[i];
    }
    const T last = std::clamp(v.back(), T(-kHalfPlaneClamp), T(kHalfPlaneClamp));
    out.back() = std::exp(last);
}

template <class T>
std::vector<T> half_plane_embed(std::span<const T> v) {
    std::vector<T> out(v.size());
    half_plane_embed(v, std::span<T>(out));
    return out;
}

/// d exp(clamp(v)) / dv.
template <class T>
T half_plane_last_derivative(T raw_last) {
    if (raw_last <= T(-kHalfPlaneClamp) || raw_last >= T(kHalfPlaneClamp)) {
        return T(0);
    }
    return std::exp(raw_last);
}

/// Session representation from the GRU output `h`:
///  vector -> (h, 1); fc -> dense^T h + bias; matrix -> h itself, read as a
///  packed symmetric n x n matrix.
template <class T>
std::vector<T> session_embedding(const Model<T>& model, std::span<const T> h) {
    const ModelShape& s = model.shape();
    require(h.size() == s.hidden, ErrorKind::kShape,
            "session_embedding: hidden width " + std::to_string(h.size()) + " != " + std::to_string(s.hidden));
    switch (s.head) {
        case Head::kVector: {
            std::vector<T> out(h.begin(), h.end());
            out.push_back(T(1));
            return out;
        }
        case Head::kFc: {
            const std::size_t m = packed_size(s.n);
            std::vector<T> out(model.dense.bias.data().begin(), model.dense.bias.data().end());
            for (std::size_t r = 0; r < h.size(); ++r) {
                const auto krow = model.dense.kernel.row(r);
                for (std::size_t c = 0; c < m; ++c) out[c] += h[r] * krow[c];
            }
            return out;
        }
        case Head::kMatrix:
            return {h.begin(), h.end()};
    }
    fail(ErrorKind::kInternal, "bad head");
}

inline PackedSymMatrix session_matrix(std::span<const float> rep, std::size_t n) {
    return reshape_to_symmetric(rep, n);
}
inline PackedSymMatrix session_matrix(std::span<const double> rep, std::size_t n) {
    return reshape_to_symmetric(rep, n);
}

/// Score of one item for a session representation produced by
/// session_embedding. Accumulates in double.
template <class T>
double score(const Model<T>& model, std::span<const T> rep, std::size_t item) {
    const ModelShape& s = model.shape();
    require(item < s.vocab, ErrorKind::kShape, "score: item id out of range");
    const auto w = model.embeddings.output.row(item);
    switch (s.head) {
        case Head::kVector: {
            require(rep.size() == s.hidden + 1, ErrorKind::kShape, "score: vector head expects extended session");
            // <(h, 1), (w_i, b_i)>
            return dot(rep.first(s.hidden), w) + static_cast<double>(rep.back()) *
                                                      static_cast<double>(model.embeddings.output_bias[item]);
        }
        case Head::kFc:
            require(rep.size() == w.size(), ErrorKind::kShape, "score: fc session width mismatch");
            return dot(rep, w) + static_cast<double>(model.embeddings.output_bias[item]);
        case Head::kMatrix: {
            require(rep.size() == packed_size(s.n), ErrorKind::kShape, "score: matrix session width mismatch");
            const auto y = half_plane_embed(w);
            const auto a = reshape_to_symmetric(rep, s.n);
            return quadratic_form(a, std::span<const T>(y));
        }
    }
    fail(ErrorKind::kInternal, "bad head");
}

/// Scores every item; pointwise identical to score(). Item rows are embedded
/// once at construction.
template <class T>
class ItemScorer {
   public:
    explicit ItemScorer(const Model<T>& model) : model_(&model) {
        if (model.shape().head == Head::kMatrix) {
            const std::size_t v = model.shape().vocab;
            const std::size_t n = model.shape().n;
            embedded_ = Tensor<T>({v, n});
            for (std::size_t i = 0; i < v; ++i) {
                half_plane_embed(model.embeddings.output.row(i), embedded_.row(i));
            }
        }
    }

    /// Half-plane embedded item rows (matrix head only).
    [[nodiscard]] const Tensor<T>& embedded_items() const { return embedded_; }

    [[nodiscard]] std::vector<double> score_all(std::span<const T> rep) const {
        const ModelShape& s = model_->shape();
        std::vector<double> out(s.vocab);
        if (s.head == Head::kMatrix) {
            const auto a = reshape_to_symmetric(rep, s.n);
            for (std::size_t i = 0; i < s.vocab; ++i) {
                out[i] = quadratic_form(a, embedded_.row(i));
            }
        } else {
            for (std::size_t i = 0; i < s.vocab; ++i) {
                out[i] = score(*model_, rep, i);
            }
        }
        return out;
    }

   private:
    const Model<T>* model_;
    Tensor<T> embedded_;
};

template <class T>
std::vector<double> score_all(const Model<T>& model, std::span<const T> rep) {
    return ItemScorer<T>(model).score_all(rep);
}

/// Runs the GRU over `items` from a zero state and returns the final hidden
/// vector (no dropout).
template <class T>
std::vector<T> encode_session(const Model<T>& model, std::span<const std::uint32_t> items) {
    std::vector<T> h(model.shape().hidden, T(0));
    std::vector<T> next(h.size());
    for (std::uint32_t item : items) {
        require(item < model.shape().vocab, ErrorKind::kInput, "encode_session: item id out of range");
        gru_step(model.gru, model.embeddings.trigger.row(item), std::span<const T>(h), std::span<T>(next));
        h.swap(next);
    }
    return h;
}

}  // namespace qsrec

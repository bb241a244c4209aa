#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "qsrec/data.hpp"
#include "qsrec/error.hpp"
#include "qsrec/model.hpp"
#include "qsrec/symmat.hpp"
#include "qsrec/tensor.hpp"

namespace qsrec {

struct TrainConfig {
    double learning_rate = 0.002;
    std::size_t batch_size = 256;
    /// Keep probability of the dropout applied to the GRU output.
    double dropout_keep = 1.0;
    std::size_t epochs = 10;
    std::uint64_t seed = 42;

    void validate() const {
        require(learning_rate > 0.0 && std::isfinite(learning_rate), ErrorKind::kInput, "learning_rate must be > 0");
        require(batch_size >= 1, ErrorKind::kInput, "batch_size must be >= 1");
        require(dropout_keep > 0.0 && dropout_keep <= 1.0, ErrorKind::kInput, "dropout_keep must be in (0, 1]");
    }
};

// ---------------------------------------------------------------------------
// Session-parallel batching

struct BatchSlot {
    std::uint32_t input = 0;
    std::uint32_t target = 0;
    /// First pair of a session in this slot; the slot's hidden state is zeroed.
    bool reset = false;
    /// False for padding slots once the corpus is exhausted.
    bool active = false;

    friend bool operator==(const BatchSlot&, const BatchSlot&) = default;
};

using Batch = std::vector<BatchSlot>;

/// Each slot walks one session pair by pair; a finished session is replaced
/// by the next unread one. Ends when every slot has run dry.
class SessionParallelBatcher {
   public:
    SessionParallelBatcher(std::span<const Session> sessions, std::size_t batch_size,
                           std::vector<std::size_t> order = {})
        : sessions_(sessions), order_(std::move(order)), cursors_(batch_size) {
        require(batch_size >= 1, ErrorKind::kInput, "batch_size must be >= 1");
        require(!sessions.empty(), ErrorKind::kInput, "cannot batch an empty corpus");
        for (const auto& s : sessions) {
            require(s.size() >= 2, ErrorKind::kInput, "every session needs at least two events");
        }
        if (order_.empty()) {
            order_.resize(sessions.size());
            std::iota(order_.begin(), order_.end(), std::size_t{0});
        }
        require(order_.size() == sessions.size(), ErrorKind::kInput, "session order has wrong length");
    }

    bool next(Batch& out) {
        out.assign(cursors_.size(), BatchSlot{});
        bool any = false;
        for (std::size_t b = 0; b < cursors_.size(); ++b) {
            Cursor& c = cursors_[b];
            bool reset = false;
            if (!c.live || c.pos + 1 >= sessions_[c.session].size()) {
                c.live = next_unread_ < order_.size();
                if (!c.live) continue;
                c.session = order_[next_unread_++];
                c.pos = 0;
                reset = true;
            }
            const Session& s = sessions_[c.session];
            out[b] = BatchSlot{s[c.pos], s[c.pos + 1], reset, true};
            ++c.pos;
            any = true;
        }
        return any;
    }

   private:
    struct Cursor {
        std::size_t session = 0;
        std::size_t pos = 0;
        bool live = false;
    };

    std::span<const Session> sessions_;
    std::vector<std::size_t> order_;
    std::vector<Cursor> cursors_;
    std::size_t next_unread_ = 0;
};

inline std::vector<Batch> session_parallel_batches(const SessionCorpus& corpus, std::size_t batch_size) {
    SessionParallelBatcher batcher(corpus.sessions, batch_size);
    std::vector<Batch> out;
    Batch batch;
    while (batcher.next(batch)) out.push_back(batch);
    return out;
}

// ---------------------------------------------------------------------------
// BPR

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

/// Mean over negatives of -ln sigmoid(positive - negative).
inline double bpr_loss(double positive, std::span<const double> negatives) {
    require(!negatives.empty(), ErrorKind::kInput, "bpr_loss needs at least one negative");
    double sum = 0.0;
    for (double neg : negatives) sum += softplus(neg - positive);
    return sum / static_cast<double>(negatives.size());
}

// ---------------------------------------------------------------------------
// One training step: forward, loss, backward. Prior hidden state is treated
// as a constant (gradients do not flow across steps).

template <class T>
struct StepWorkspace {
    std::vector<std::size_t> active;  // slot ids that carry a pair
    Tensor<T> x;                      // A x d_in trigger rows
    Tensor<T> h_prev;                 // A x h
    Tensor<T> h_new;                  // A x h, undropped GRU output
    Tensor<T> hd;                     // A x h, after dropout
    Tensor<T> rep;                    // A x session_width
    std::vector<GruActivations<T>> acts;
    Tensor<T> items;     // A x output width: raw rows (vector/fc) or half-plane rows (matrix)
    Tensor<T> item_g2;   // A x n(n+1)/2, gamma2 of the half-plane rows (matrix)
    Tensor<T> scores;    // A x A: session a against target of slot c
    Tensor<T> d_scores;  // dL/dscores
    Tensor<T> d_rep;     // dL/drep
    Tensor<T> d_hd;      // dL/dhd
};

struct StepResult {
    double loss = 0.0;
    /// Sessions that contributed a loss term (0 when fewer than two slots are active).
    std::size_t scored = 0;
};

namespace detail {

template <class T>
void gather_active(const Batch& batch, StepWorkspace<T>& ws) {
    ws.active.clear();
    for (std::size_t b = 0; b < batch.size(); ++b) {
        if (batch[b].active) ws.active.push_back(b);
    }
}

// (A y) for packed symmetric A.
template <class T>
void packed_matvec(std::span<const T> packed, std::span<const T> y, std::span<T> out) {
    const std::size_t n = y.size();
    std::fill(out.begin(), out.end(), T(0));
    std::size_t p = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i; j < n; ++j, ++p) {
            out[i] += packed[p] * y[j];
            if (j != i) out[j] += packed[p] * y[i];
        }
    }
}

}  // namespace detail

/// Scores every active session against every active slot's target.
template <class T>
void score_batch(const Model<T>& model, const Batch& batch, StepWorkspace<T>& ws) {
    const ModelShape& s = model.shape();
    const std::size_t a_count = ws.active.size();
    const std::size_t width = s.output_width();
    ws.items = Tensor<T>({a_count, width});
    for (std::size_t c = 0; c < a_count; ++c) {
        const auto raw = model.embeddings.output.row(batch[ws.active[c]].target);
        if (s.head == Head::kMatrix) {
            half_plane_embed(raw, ws.items.row(c));
        } else {
            std::copy(raw.begin(), raw.end(), ws.items.row(c).begin());
        }
    }
    if (s.head == Head::kMatrix) {
        ws.item_g2 = Tensor<T>({a_count, packed_size(s.n)});
        for (std::size_t c = 0; c < a_count; ++c) {
            const auto y = ws.items.row(c);
            auto g = ws.item_g2.row(c);
            std::size_t p = 0;
            for (std::size_t i = 0; i < s.n; ++i) {
                for (std::size_t j = i; j < s.n; ++j, ++p) g[p] = (i == j ? T(1) : T(2)) * y[i] * y[j];
            }
        }
    }
    const Tensor<T>& cand = s.head == Head::kMatrix ? ws.item_g2 : ws.items;
    ws.scores = Tensor<T>({a_count, a_count});
    for (std::size_t a = 0; a < a_count; ++a) {
        const auto rep = ws.rep.row(a);
        for (std::size_t c = 0; c < a_count; ++c) {
            const auto w = cand.row(c);
            T sum = T(0);
            for (std::size_t k = 0; k < w.size(); ++k) sum += rep[k] * w[k];
            if (s.has_output_bias()) sum += model.embeddings.output_bias[batch[ws.active[c]].target];
            ws.scores(a, c) = sum;
        }
    }
}

/// In-batch BPR: slot a's positive is its own target, negatives are the
/// other active slots' targets. Fills ws.d_scores; returns the mean loss.
template <class T>
StepResult bpr_batch_loss(StepWorkspace<T>& ws) {
    const std::size_t a_count = ws.active.size();
    ws.d_scores = Tensor<T>({a_count, a_count});
    StepResult result;
    if (a_count < 2) return result;
    const double coef = 1.0 / (static_cast<double>(a_count) * static_cast<double>(a_count - 1));
    double total = 0.0;
    for (std::size_t a = 0; a < a_count; ++a) {
        const double pos = ws.scores(a, a);
        for (std::size_t c = 0; c < a_count; ++c) {
            if (c == a) continue;
            const double margin = pos - static_cast<double>(ws.scores(a, c));
            total += softplus(-margin);
            const double g = coef * (1.0 / (1.0 + std::exp(margin)));  // sigmoid(-margin)
            ws.d_scores(a, a) -= static_cast<T>(g);
            ws.d_scores(a, c) += static_cast<T>(g);
        }
    }
    result.loss = total * coef;
    result.scored = a_count;
    return result;
}

/// Backpropagates d_scores into the head and output embeddings; leaves
/// dL/d(dropped hidden) in ws.d_hd.
template <class T>
void head_backward(const Model<T>& model, const Batch& batch, StepWorkspace<T>& ws, Model<T>& grads) {
    const ModelShape& s = model.shape();
    const std::size_t a_count = ws.active.size();
    const std::size_t sw = s.session_width();
    const Tensor<T>& cand = s.head == Head::kMatrix ? ws.item_g2 : ws.items;

    ws.d_rep = Tensor<T>({a_count, sw});
    for (std::size_t a = 0; a < a_count; ++a) {
        auto dr = ws.d_rep.row(a);
        for (std::size_t c = 0; c < a_count; ++c) {
            const T g = ws.d_scores(a, c);
            if (g == T(0)) continue;
            const auto w = cand.row(c);
            for (std::size_t k = 0; k < sw; ++k) dr[k] += g * w[k];
        }
    }

    // Output embeddings.
    if (s.head == Head::kMatrix) {
        std::vector<T> ay(s.n), dy(s.n);
        for (std::size_t c = 0; c < a_count; ++c) {
            const auto y = ws.items.row(c);
            std::fill(dy.begin(), dy.end(), T(0));
            for (std::size_t a = 0; a < a_count; ++a) {
                const T g = ws.d_scores(a, c);
                if (g == T(0)) continue;
                detail::packed_matvec(std::span<const T>(ws.rep.row(a)), std::span<const T>(y), std::span<T>(ay));
                for (std::size_t i = 0; i < s.n; ++i) dy[i] += T(2) * g * ay[i];
            }
            const std::uint32_t item = batch[ws.active[c]].target;
            const auto raw = model.embeddings.output.row(item);
            auto gw = grads.embeddings.output.row(item);
            for (std::size_t i = 0; i + 1 < s.n; ++i) gw[i] += dy[i];
            gw[s.n - 1] += dy[s.n - 1] * half_plane_last_derivative(raw[s.n - 1]);
        }
    } else {
        for (std::size_t c = 0; c < a_count; ++c) {
            const std::uint32_t item = batch[ws.active[c]].target;
            auto gw = grads.embeddings.output.row(item);
            T gb = T(0);
            for (std::size_t a = 0; a < a_count; ++a) {
                const T g = ws.d_scores(a, c);
                if (g == T(0)) continue;
                const auto rep = ws.rep.row(a);
                for (std::size_t k = 0; k < sw; ++k) gw[k] += g * rep[k];
                gb += g;
            }
            grads.embeddings.output_bias[item] += gb;
        }
    }

    // Dense expansion (fc) or identity.
    ws.d_hd = Tensor<T>({a_count, s.hidden});
    if (s.head == Head::kFc) {
        for (std::size_t a = 0; a < a_count; ++a) {
            const auto dr = ws.d_rep.row(a);
            const auto hd = ws.hd.row(a);
            auto dh = ws.d_hd.row(a);
            for (std::size_t r = 0; r < s.hidden; ++r) {
                const auto krow = model.dense.kernel.row(r);
                auto gk = grads.dense.kernel.row(r);
                T acc = T(0);
                for (std::size_t col = 0; col < sw; ++col) {
                    gk[col] += hd[r] * dr[col];
                    acc += krow[col] * dr[col];
                }
                dh[r] = acc;
            }
            for (std::size_t col = 0; col < sw; ++col) grads.dense.bias[col] += dr[col];
        }
    } else {
        ws.d_hd = ws.d_rep;
    }
}

/// GRU backward for one slot with h_prev held constant; accumulates into
/// the GRU kernels and the trigger row of the slot's input item.
template <class T>
void gru_backward(const GruParams<T>& p, std::span<const T> x, std::span<const T> h_prev,
                  const GruActivations<T>& acts, std::span<const T> d_out, GruParams<T>& gp, std::span<T> d_x) {
    const std::size_t hid = p.hidden();
    const std::size_t din = p.input_dim();
    std::vector<T> dcp(hid), dg(2 * hid), d_rh(hid, T(0));
    for (std::size_t k = 0; k < hid; ++k) {
        const T z = acts.update[k];
        const T c = acts.candidate[k];
        const T dz = d_out[k] * (c - h_prev[k]);
        const T dc = d_out[k] * z;
        dcp[k] = dc * (T(1) - c * c);
        dg[k] = dz * z * (T(1) - z);
    }
    // Candidate layer.
    for (std::size_t k = 0; k < din; ++k) {
        auto gk = gp.candidate_kernel.row(k);
        const auto wk = p.candidate_kernel.row(k);
        T acc = T(0);
        for (std::size_t col = 0; col < hid; ++col) {
            gk[col] += x[k] * dcp[col];
            acc += wk[col] * dcp[col];
        }
        d_x[k] += acc;
    }
    for (std::size_t k = 0; k < hid; ++k) {
        auto gk = gp.candidate_kernel.row(din + k);
        const auto wk = p.candidate_kernel.row(din + k);
        const T rh = acts.reset[k] * h_prev[k];
        T acc = T(0);
        for (std::size_t col = 0; col < hid; ++col) {
            gk[col] += rh * dcp[col];
            acc += wk[col] * dcp[col];
        }
        d_rh[k] = acc;
    }
    for (std::size_t col = 0; col < hid; ++col) gp.candidate_bias[col] += dcp[col];
    for (std::size_t k = 0; k < hid; ++k) {
        const T r = acts.reset[k];
        dg[hid + k] = d_rh[k] * h_prev[k] * r * (T(1) - r);
    }
    // Gates layer.
    for (std::size_t k = 0; k < din; ++k) {
        auto gk = gp.gates_kernel.row(k);
        const auto wk = p.gates_kernel.row(k);
        T acc = T(0);
        for (std::size_t col = 0; col < 2 * hid; ++col) {
            gk[col] += x[k] * dg[col];
            acc += wk[col] * dg[col];
        }
        d_x[k] += acc;
    }
    for (std::size_t k = 0; k < hid; ++k) {
        const T hk = h_prev[k];
        if (hk == T(0)) continue;
        auto gk = gp.gates_kernel.row(din + k);
        for (std::size_t col = 0; col < 2 * hid; ++col) gk[col] += hk * dg[col];
    }
    for (std::size_t col = 0; col < 2 * hid; ++col) gp.gates_bias[col] += dg[col];
}

/// Forward pass of one batch. `hidden` holds one row per slot (B x h) and is
/// read as the prior state; `mask` is B x h inverted-dropout multipliers or
/// null for no dropout. Does not modify `hidden`.
template <class T>
StepResult forward_step(const Model<T>& model, const Batch& batch, const Tensor<T>& hidden, const Tensor<T>* mask,
                        StepWorkspace<T>& ws) {
    const ModelShape& s = model.shape();
    require(hidden.rows() == batch.size() && hidden.cols() == s.hidden, ErrorKind::kShape,
            "forward_step: hidden state shape mismatch");
    detail::gather_active(batch, ws);
    const std::size_t a_count = ws.active.size();
    ws.x = Tensor<T>({a_count, s.input_dim});
    ws.h_prev = Tensor<T>({a_count, s.hidden});
    ws.h_new = Tensor<T>({a_count, s.hidden});
    ws.hd = Tensor<T>({a_count, s.hidden});
    ws.rep = Tensor<T>({a_count, s.session_width()});
    ws.acts.assign(a_count, {});
    for (std::size_t a = 0; a < a_count; ++a) {
        const BatchSlot& slot = batch[ws.active[a]];
        require(slot.input < s.vocab && slot.target < s.vocab, ErrorKind::kInput, "batch item id out of range");
        const auto emb = model.embeddings.trigger.row(slot.input);
        std::copy(emb.begin(), emb.end(), ws.x.row(a).begin());
        if (!slot.reset) {
            const auto prev = hidden.row(ws.active[a]);
            std::copy(prev.begin(), prev.end(), ws.h_prev.row(a).begin());
        }
        gru_step(model.gru, std::span<const T>(ws.x.row(a)), std::span<const T>(ws.h_prev.row(a)), ws.h_new.row(a),
                 &ws.acts[a]);
        auto hd = ws.hd.row(a);
        const auto hn = ws.h_new.row(a);
        for (std::size_t k = 0; k < s.hidden; ++k) {
            hd[k] = mask != nullptr ? hn[k] * (*mask)(ws.active[a], k) : hn[k];
        }
        auto rep = ws.rep.row(a);
        if (s.head == Head::kFc) {
            const auto srep = session_embedding(model, std::span<const T>(hd));
            std::copy(srep.begin(), srep.end(), rep.begin());
        } else {
            std::copy(hd.begin(), hd.end(), rep.begin());
        }
    }
    score_batch(model, batch, ws);
    return bpr_batch_loss(ws);
}

/// Accumulates the gradient of the last forward_step's loss into `grads`.
template <class T>
void backward_step(const Model<T>& model, const Batch& batch, const Tensor<T>* mask, StepWorkspace<T>& ws,
                   Model<T>& grads) {
    const ModelShape& s = model.shape();
    require(grads.shape() == s, ErrorKind::kInternal, "gradient buffer shape mismatch");
    if (ws.active.size() < 2) return;
    head_backward(model, batch, ws, grads);
    std::vector<T> d_h(s.hidden), d_x(s.input_dim);
    for (std::size_t a = 0; a < ws.active.size(); ++a) {
        const auto dhd = ws.d_hd.row(a);
        for (std::size_t k = 0; k < s.hidden; ++k) {
            d_h[k] = mask != nullptr ? dhd[k] * (*mask)(ws.active[a], k) : dhd[k];
        }
        std::fill(d_x.begin(), d_x.end(), T(0));
        gru_backward(model.gru, std::span<const T>(ws.x.row(a)), std::span<const T>(ws.h_prev.row(a)), ws.acts[a],
                     std::span<const T>(d_h), grads.gru, std::span<T>(d_x));
        auto gt = grads.embeddings.trigger.row(batch[ws.active[a]].input);
        for (std::size_t k = 0; k < s.input_dim; ++k) gt[k] += d_x[k];
    }
}

/// Copies the new hidden rows of active slots into `hidden`.
template <class T>
void commit_hidden(const StepWorkspace<T>& ws, Tensor<T>& hidden) {
    for (std::size_t a = 0; a < ws.active.size(); ++a) {
        const auto src = ws.h_new.row(a);
        std::copy(src.begin(), src.end(), hidden.row(ws.active[a]).begin());
    }
}

template <class T>
void zero_gradients(Model<T>& grads) {
    grads.for_each_parameter([](const std::string&, Tensor<T>& t) { t.fill(T(0)); });
}

// ---------------------------------------------------------------------------
// Adam

template <class T>
struct AdamState {
    Model<T> m;
    Model<T> v;
    std::uint64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    AdamState() = default;
    explicit AdamState(const ModelShape& shape) : m(shape), v(shape) {}
};

/// Bias-corrected Adam.
template <class T>
void adam_update(Model<T>& params, const Model<T>& grads, AdamState<T>& state, double learning_rate) {
    require(params.shape() == grads.shape() && params.shape() == state.m.shape(), ErrorKind::kShape,
            "adam_update: shape mismatch");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(state.beta1, t);
    const double bc2 = 1.0 - std::pow(state.beta2, t);
    const double b1 = state.beta1;
    const double b2 = state.beta2;
    const double eps = state.epsilon;
    params.for_each_parameter([&](const std::string& name, Tensor<T>& p) {
        const Tensor<T>& g = *grads.tensor_by_name(name);
        Tensor<T>& m = *state.m.tensor_by_name(name);
        Tensor<T>& v = *state.v.tensor_by_name(name);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
            const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double update = learning_rate * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
            p[i] = static_cast<T>(static_cast<double>(p[i]) - update);
        }
    });
}

// ---------------------------------------------------------------------------
// Training loop

struct LossRecord {
    std::size_t epoch = 0;  // 1-based
    std::size_t step = 0;   // 1-based within the epoch
    double loss = 0.0;

    friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

inline std::string format_loss_record(const LossRecord& r) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "epoch %zu step %zu loss %.9g\n", r.epoch, r.step, r.loss);
    return buf;
}

template <class T>
struct TrainState {
    Model<T> model;
    AdamState<T> adam;
    std::size_t epochs_done = 0;
};

template <class T>
TrainState<T> init_training(const ModelShape& shape, const TrainConfig& config) {
    config.validate();
    TrainState<T> state{Model<T>::initialized(shape, config.seed), AdamState<T>(shape), 0};
    return state;
}

namespace detail {

// Per-epoch generator: batch order and dropout masks of epoch e depend only
// on (seed, e), which makes resumed runs match uninterrupted ones.
inline std::mt19937_64 epoch_rng(std::uint64_t seed, std::size_t epoch) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch), 0x51u};
    return std::mt19937_64(seq);
}

template <class T>
void draw_dropout_mask(const Batch& batch, double keep, std::mt19937_64& rng, Tensor<T>& mask) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const T scale = static_cast<T>(1.0 / keep);
    mask.fill(T(0));
    for (std::size_t b = 0; b < batch.size(); ++b) {
        if (!batch[b].active) continue;
        auto row = mask.row(b);
        for (auto& m : row) m = u(rng) < keep ? scale : T(0);
    }
}

}  // namespace detail

using LossCallback = std::function<void(const LossRecord&)>;

/// Runs one more epoch over `corpus`, returning its mean step loss.
template <class T>
double train_epoch(TrainState<T>& state, const SessionCorpus& corpus, const TrainConfig& config,
                   const LossCallback& on_loss = {}, std::vector<LossRecord>* trace = nullptr) {
    config.validate();
    const ModelShape& shape = state.model.shape();
    for (const auto& s : corpus.sessions) {
        for (std::uint32_t id : s) require(id < shape.vocab, ErrorKind::kInput, "corpus item id exceeds model vocab");
    }
    const std::size_t epoch = state.epochs_done + 1;
    auto rng = detail::epoch_rng(config.seed, epoch);
    std::vector<std::size_t> order(corpus.sessions.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);

    SessionParallelBatcher batcher(corpus.sessions, config.batch_size, std::move(order));
    Tensor<T> hidden({config.batch_size, shape.hidden});
    Tensor<T> mask({config.batch_size, shape.hidden});
    const bool use_dropout = config.dropout_keep < 1.0;
    Model<T> grads(shape);
    StepWorkspace<T> ws;
    Batch batch;
    std::size_t step = 0;
    double loss_sum = 0.0;
    std::size_t loss_steps = 0;
    while (batcher.next(batch)) {
        if (use_dropout) detail::draw_dropout_mask(batch, config.dropout_keep, rng, mask);
        const Tensor<T>* m = use_dropout ? &mask : nullptr;
        const StepResult r = forward_step(state.model, batch, hidden, m, ws);
        commit_hidden(ws, hidden);
        if (r.scored == 0) continue;
        ++step;
        if (!std::isfinite(r.loss)) {
            fail(ErrorKind::kTraining,
                 "non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step));
        }
        zero_gradients(grads);
        backward_step(state.model, batch, m, ws, grads);
        adam_update(state.model, grads, state.adam, config.learning_rate);
        const LossRecord rec{epoch, step, r.loss};
        if (on_loss) on_loss(rec);
        if (trace != nullptr) trace->push_back(rec);
        loss_sum += r.loss;
        ++loss_steps;
    }
    state.epochs_done = epoch;
    return loss_steps == 0 ? 0.0 : loss_sum / static_cast<double>(loss_steps);
}

template <class T>
struct TrainResult {
    Model<T> model;
    AdamState<T> adam;
    std::vector<LossRecord> trace;
    std::vector<double> epoch_mean_loss;
};

/// Deterministic given (corpus, shape, config).
template <class T>
TrainResult<T> train(const SessionCorpus& corpus, const ModelShape& shape, const TrainConfig& config,
                     const LossCallback& on_loss = {}) {
    TrainState<T> state = init_training<T>(shape, config);
    TrainResult<T> result;
    for (std::size_t e = 0; e < config.epochs; ++e) {
        result.epoch_mean_loss.push_back(train_epoch(state, corpus, config, on_loss, &result.trace));
    }
    result.model = std::move(state.model);
    result.adam = std::move(state.adam);
    return result;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckOptions {
    double epsilon = 1e-5;
    std::size_t batch_size = 4;
    double dropout_keep = 1.0;
    std::uint64_t seed = 7;
    /// 0 checks every batch of the corpus.
    std::size_t max_batches = 0;
    /// Denominator floor, so coordinates whose true gradient is ~0 are
    /// judged by absolute error instead of amplified roundoff.
    double floor = 1e-6;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_tensor;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t coordinates = 0;
    std::size_t batches = 0;

    [[nodiscard]] bool passed(double tolerance = 1e-4) const { return max_rel_error <= tolerance; }
};

/// Compares backward_step against central differences of the step loss for
/// every parameter coordinate, batch by batch, carrying hidden state forward
/// as in training. Error per coordinate is
/// |analytic - numeric| / max(floor, |analytic|, |numeric|).
inline GradCheckReport grad_check(const Model<double>& model, const SessionCorpus& corpus,
                                  const GradCheckOptions& opts = {}) {
    const ModelShape& shape = model.shape();
    Model<double> probe = model;
    Model<double> grads(shape);
    StepWorkspace<double> ws;
    StepWorkspace<double> scratch;
    Tensor<double> hidden({opts.batch_size, shape.hidden});
    Tensor<double> mask({opts.batch_size, shape.hidden});
    std::mt19937_64 rng(opts.seed);
    const bool use_dropout = opts.dropout_keep < 1.0;
    GradCheckReport report;

    SessionParallelBatcher batcher(corpus.sessions, opts.batch_size);
    Batch batch;
    while (batcher.next(batch)) {
        if (opts.max_batches != 0 && report.batches == opts.max_batches) break;
        if (use_dropout) detail::draw_dropout_mask(batch, opts.dropout_keep, rng, mask);
        const Tensor<double>* m = use_dropout ? &mask : nullptr;
        const StepResult r = forward_step(model, batch, hidden, m, ws);
        if (r.scored > 0) {
            ++report.batches;
            zero_gradients(grads);
            backward_step(model, batch, m, ws, grads);
            grads.for_each_parameter([&](const std::string& name, const Tensor<double>& g) {
                Tensor<double>& p = *probe.tensor_by_name(name);
                for (std::size_t i = 0; i < p.size(); ++i) {
                    const double orig = p[i];
                    p[i] = orig + opts.epsilon;
                    const double up = forward_step(probe, batch, hidden, m, scratch).loss;
                    p[i] = orig - opts.epsilon;
                    const double down = forward_step(probe, batch, hidden, m, scratch).loss;
                    p[i] = orig;
                    const double numeric = (up - down) / (2.0 * opts.epsilon);
                    const double analytic = g[i];
                    const double err = std::abs(analytic - numeric) /
                                       std::max({opts.floor, std::abs(analytic), std::abs(numeric)});
                    ++report.coordinates;
                    if (report.coordinates == 1 || err > report.max_rel_error) {
                        report.max_rel_error = err;
                        report.worst_tensor = name;
                        report.worst_index = i;
                        report.worst_analytic = analytic;
                        report.worst_numeric = numeric;
                    }
                }
            });
        }
        commit_hidden(ws, hidden);
    }
    return report;
}

}  // namespace qsrec

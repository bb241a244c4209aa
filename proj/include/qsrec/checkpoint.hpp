#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "qsrec/binary_io.hpp"
#include "qsrec/error.hpp"
#include "qsrec/model.hpp"
#include "qsrec/training.hpp"

namespace qsrec {

inline constexpr std::string_view kCheckpointMagic = "QSMDL1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Header fields, in file order.
struct CheckpointHeader {
    std::uint32_t version = kCheckpointVersion;
    ModelShape shape;
    std::uint64_t seed = 0;
    std::uint8_t precision = 32;  // 32 or 64
    std::uint64_t adam_step = 0;
    std::uint32_t epochs_done = 0;
    bool has_optimizer = false;

    friend bool operator==(const CheckpointHeader&, const CheckpointHeader&) = default;
};

/// A saved model with optional optimizer state.
struct Checkpoint {
    CheckpointHeader header;
    std::variant<TrainState<float>, TrainState<double>> state;

    template <class T>
    static Checkpoint from_state(const TrainState<T>& s, std::uint64_t seed, bool with_optimizer = true) {
        static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
        Checkpoint c;
        c.header.shape = s.model.shape();
        c.header.seed = seed;
        c.header.precision = sizeof(T) == 4 ? 32 : 64;
        c.header.adam_step = with_optimizer ? s.adam.step : 0;
        c.header.epochs_done = static_cast<std::uint32_t>(s.epochs_done);
        c.header.has_optimizer = with_optimizer;
        c.state = s;
        if (!with_optimizer) std::get<TrainState<T>>(c.state).adam = AdamState<T>(s.model.shape());
        return c;
    }

    template <class T>
    static Checkpoint from_model(const Model<T>& m, std::uint64_t seed) {
        return from_state(TrainState<T>{m, AdamState<T>(m.shape()), 0}, seed, false);
    }
};

namespace detail {

template <class T>
void write_tensor(io::Writer& w, const std::string& name, const Tensor<T>& t) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (T x : t.data()) {
        if constexpr (std::is_same_v<T, float>) {
            w.f32(x);
        } else {
            w.f64(x);
        }
    }
}

template <class T>
void read_tensor(io::Reader& r, const std::string& expected, Tensor<T>& dst) {
    const std::string name = r.str();
    require(name == expected, ErrorKind::kFormat,
            r.what() + ": expected tensor '" + expected + "', found '" + name + "'");
    const std::uint32_t rank = r.u32();
    std::vector<std::size_t> dims(rank);
    for (auto& d : dims) d = r.u32();
    require(dims == dst.shape(), ErrorKind::kFormat,
            r.what() + ": tensor '" + name + "' has shape " + shape_string(dims) + ", expected " +
                shape_string(dst.shape()));
    for (auto& x : dst.data()) {
        if constexpr (std::is_same_v<T, float>) {
            x = r.f32();
        } else {
            x = r.f64();
        }
    }
}

}  // namespace detail

/// Layout: magic, u32 version, u8 head, u32 n, u32 h, u32 V, u64 seed,
/// u8 precision, u32 d, u64 adam step, u32 epochs done, u8 optimizer flag,
/// u32 tensor count, named tensors, u32 crc32 of everything before it.
inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
    const CheckpointHeader& h = c.header;
    h.shape.validate();
    io::Writer w;
    w.magic(kCheckpointMagic);
    w.u32(h.version);
    w.u8(static_cast<std::uint8_t>(h.shape.head));
    w.u32(static_cast<std::uint32_t>(h.shape.n));
    w.u32(static_cast<std::uint32_t>(h.shape.hidden));
    w.u32(static_cast<std::uint32_t>(h.shape.vocab));
    w.u64(h.seed);
    w.u8(h.precision);
    w.u32(static_cast<std::uint32_t>(h.shape.input_dim));
    w.u64(h.adam_step);
    w.u32(h.epochs_done);
    w.u8(h.has_optimizer ? 1 : 0);
    std::visit(
        [&](const auto& s) {
            const std::size_t per_model = parameter_inventory(h.shape).size();
            w.u32(static_cast<std::uint32_t>(per_model * (h.has_optimizer ? 3 : 1)));
            s.model.for_each_parameter([&](const std::string& name, const auto& t) { detail::write_tensor(w, name, t); });
            if (h.has_optimizer) {
                s.adam.m.for_each_parameter(
                    [&](const std::string& name, const auto& t) { detail::write_tensor(w, "adam.m/" + name, t); });
                s.adam.v.for_each_parameter(
                    [&](const std::string& name, const auto& t) { detail::write_tensor(w, "adam.v/" + name, t); });
            }
        },
        c.state);
    const auto& buf = w.buffer();
    w.u32(io::crc32_of(buf.data(), buf.size()));
    return std::move(w.buffer());
}

inline CheckpointHeader decode_checkpoint_header(io::Reader& r) {
    r.expect_magic(kCheckpointMagic);
    CheckpointHeader h;
    h.version = r.u32();
    require(h.version == kCheckpointVersion, ErrorKind::kFormat,
            r.what() + ": unsupported checkpoint version " + std::to_string(h.version));
    const std::uint8_t head = r.u8();
    require(head >= 1 && head <= 3, ErrorKind::kFormat, r.what() + ": bad head tag");
    h.shape.head = static_cast<Head>(head);
    h.shape.n = r.u32();
    h.shape.hidden = r.u32();
    h.shape.vocab = r.u32();
    h.seed = r.u64();
    h.precision = r.u8();
    require(h.precision == 32 || h.precision == 64, ErrorKind::kFormat, r.what() + ": bad precision flag");
    h.shape.input_dim = r.u32();
    h.adam_step = r.u64();
    h.epochs_done = r.u32();
    h.has_optimizer = r.u8() != 0;
    try {
        h.shape.validate();
    } catch (const Error& e) {
        fail(ErrorKind::kFormat, r.what() + ": invalid shape in header (" + e.what() + ")");
    }
    return h;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& name = "checkpoint") {
    require(bytes.size() >= 4, ErrorKind::kIo, name + ": truncated file");
    std::uint32_t stored = 0;
    std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
    if (io::crc32_of(bytes.data(), bytes.size() - 4) != stored) {
        fail(ErrorKind::kIo, name + ": checksum mismatch (corrupted checkpoint)");
    }
    const std::vector<std::uint8_t> body(bytes.begin(), bytes.end() - 4);
    io::Reader r(body, name);
    Checkpoint c;
    c.header = decode_checkpoint_header(r);
    const std::uint32_t count = r.u32();
    const std::size_t per_model = parameter_inventory(c.header.shape).size();
    require(count == per_model * (c.header.has_optimizer ? 3 : 1), ErrorKind::kFormat,
            name + ": unexpected tensor count");
    auto load = [&]<class T>(TrainState<T> s) {
        s.model = Model<T>(c.header.shape);
        s.adam = AdamState<T>(c.header.shape);
        s.model.for_each_parameter([&](const std::string& n, Tensor<T>& t) { detail::read_tensor(r, n, t); });
        if (c.header.has_optimizer) {
            s.adam.m.for_each_parameter([&](const std::string& n, Tensor<T>& t) { detail::read_tensor(r, "adam.m/" + n, t); });
            s.adam.v.for_each_parameter([&](const std::string& n, Tensor<T>& t) { detail::read_tensor(r, "adam.v/" + n, t); });
        }
        s.adam.step = c.header.adam_step;
        s.epochs_done = c.header.epochs_done;
        c.state = std::move(s);
    };
    if (c.header.precision == 32) {
        load(TrainState<float>{});
    } else {
        load(TrainState<double>{});
    }
    require(r.remaining() == 0, ErrorKind::kFormat, name + ": trailing bytes");
    return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
    io::write_file_atomic(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(io::read_file(path), path.string());
}

/// Returns the model at precision T, converting if the checkpoint differs.
template <class T>
Model<T> checkpoint_model(const Checkpoint& c) {
    return std::visit(
        [](const auto& s) -> Model<T> {
            using S = typename std::decay_t<decltype(s.model)>::scalar_type;
            if constexpr (std::is_same_v<S, T>) {
                return s.model;
            } else {
                return s.model.template cast<T>();
            }
        },
        c.state);
}

}  // namespace qsrec

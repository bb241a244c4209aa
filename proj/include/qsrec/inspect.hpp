#pragma once

#include <cstdio>
#include <string>

#include "qsrec/checkpoint.hpp"
#include "qsrec/model.hpp"
#include "qsrec/tensor.hpp"

namespace qsrec {

/// Parameter table: one row per tensor with shape, count and running total,
/// followed by the grand total.
inline std::string format_parameter_table(const ModelShape& shape) {
    std::string out;
    char line[160];
    std::snprintf(line, sizeof(line), "%-28s %-16s %12s %12s\n", "tensor", "shape", "params", "total");
    out += line;
    std::size_t total = 0;
    for (const auto& spec : parameter_inventory(shape)) {
        total += spec.count;
        std::snprintf(line, sizeof(line), "%-28s %-16s %12zu %12zu\n", spec.name.c_str(),
                      shape_string(spec.shape).c_str(), spec.count, total);
        out += line;
    }
    std::snprintf(line, sizeof(line), "total parameters: %zu\n", total);
    return out + line;
}

inline std::string format_checkpoint_header(const CheckpointHeader& h) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "version:     %u\n"
                  "head:        %s\n"
                  "vocab:       %zu\n"
                  "input_dim:   %zu\n"
                  "hidden:      %zu\n"
                  "n:           %zu\n"
                  "seed:        %llu\n"
                  "precision:   %u\n"
                  "epochs_done: %u\n"
                  "adam_step:   %llu\n"
                  "optimizer:   %s\n",
                  h.version, head_name(h.shape.head), h.shape.vocab, h.shape.input_dim, h.shape.hidden, h.shape.n,
                  static_cast<unsigned long long>(h.seed), static_cast<unsigned>(h.precision), h.epochs_done,
                  static_cast<unsigned long long>(h.adam_step), h.has_optimizer ? "yes" : "no");
    return buf;
}

}  // namespace qsrec

#pragma once

// Independent double-loop implementations of the loss equations, used by unit
// tests and the acceptance suite. Deliberately written with bare loops and
// no code shared with the library path they check.

#include <cmath>
#include <cstdint>
#include <vector>

#include "propot/tensor.hpp"

namespace propot::testing {

inline double o_cos(const Tensor& a, int64_t i, const Tensor& b, int64_t j) {
    double dot = 0, na = 0, nb = 0;
    for (int64_t k = 0; k < a.cols(); ++k) {
        dot += a.at(i, k) * b.at(j, k);
        na += a.at(i, k) * a.at(i, k);
        nb += b.at(j, k) * b.at(j, k);
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline double oracle_sdm(const Tensor& v, const Tensor& t, const std::vector<int64_t>& labels,
                         double tau, double eps) {
    const int64_t b = v.rows();
    auto direction = [&](const Tensor& x, const Tensor& y) {
        double total = 0;
        for (int64_t i = 0; i < b; ++i) {
            std::vector<double> e(static_cast<size_t>(b));
            double z = 0;
            for (int64_t j = 0; j < b; ++j) {
                e[static_cast<size_t>(j)] = std::exp(o_cos(x, i, y, j) / tau);
                z += e[static_cast<size_t>(j)];
            }
            int64_t pos = 0;
            for (int64_t j = 0; j < b; ++j) pos += labels[static_cast<size_t>(i)] == labels[static_cast<size_t>(j)];
            for (int64_t j = 0; j < b; ++j) {
                double p = e[static_cast<size_t>(j)] / z;
                double q = labels[static_cast<size_t>(i)] == labels[static_cast<size_t>(j)]
                               ? 1.0 / static_cast<double>(pos)
                               : 0.0;
                total += p * std::log(p / (q + eps));
            }
        }
        return total / static_cast<double>(b);
    };
    return direction(v, t) + direction(t, v);
}

inline double oracle_p2i(const Tensor& v, const Tensor& t, const Tensor& proto_v,
                         const Tensor& proto_t, const std::vector<int64_t>& labels,
                         const std::vector<int64_t>& proto_ids, double tau, bool literal) {
    const int64_t b = v.rows();
    auto side = [&](const Tensor& proto, const Tensor& inst) {
        double total = 0;
        for (size_t i = 0; i < proto_ids.size(); ++i) {
            std::vector<int64_t> members;
            for (int64_t j = 0; j < b; ++j)
                if (labels[static_cast<size_t>(j)] == proto_ids[i]) members.push_back(j);
            if (members.empty()) continue;
            double z = 0;
            for (int64_t j = 0; j < b; ++j)
                z += std::exp(o_cos(proto, static_cast<int64_t>(i), inst, j) / tau);
            double acc = 0;
            for (int64_t p : members) {
                double num = std::exp(o_cos(proto, static_cast<int64_t>(i), inst, p) / tau);
                acc += literal ? num / z : std::log(num / z);
            }
            total += -acc / static_cast<double>(members.size());
        }
        return total;
    };
    return side(proto_v, v) + side(proto_t, t);
}

inline double oracle_ce_mean(const Tensor& logits, const std::vector<int64_t>& labels) {
    double total = 0;
    for (int64_t i = 0; i < logits.rows(); ++i) {
        double mx = logits.at(i, 0);
        for (int64_t j = 1; j < logits.cols(); ++j) mx = std::max(mx, logits.at(i, j));
        double z = 0;
        for (int64_t j = 0; j < logits.cols(); ++j) z += std::exp(logits.at(i, j) - mx);
        total += -(logits.at(i, labels[static_cast<size_t>(i)]) - mx - std::log(z));
    }
    return total / static_cast<double>(logits.rows());
}

}  // namespace propot::testing

#pragma once

/**
 * @file functional.hpp
 * @brief Numerical execution of a slice plan against an attention oracle.
 *
 * execute_functional() walks row blocks and column blocks in the same order
 * as the timed plan and keeps per-tile state exactly as the tiles do: each
 * tile holds its O slice and its own copy of the row statistics, and the
 * group combines partial maxima, denominators and O slices through explicit
 * row reductions. Arithmetic is double precision; the oracle uses long
 * double.
 */

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "slice_plan.hpp"

namespace flatsim {

struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c, double fill = 0.0) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

    double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
};

/**
 * Standard-normal generator: std::mt19937_64 (seeded with `seed`) feeding a
 * Box-Muller transform. u1 = ((x >> 11) + 1) * 2^-53 in (0, 1],
 * u2 = (y >> 11) * 2^-53 in [0, 1); each pair of draws yields
 * sqrt(-2 ln u1) * cos(2 pi u2) and then sqrt(-2 ln u1) * sin(2 pi u2).
 */
class NormalGenerator {
public:
    explicit NormalGenerator(std::uint64_t seed) : engine_(seed) {}

    double next() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        constexpr double kScale = 1.0 / 9007199254740992.0;  // 2^-53
        const double u1 = static_cast<double>((engine_() >> 11) + 1) * kScale;
        const double u2 = static_cast<double>(engine_() >> 11) * kScale;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline Matrix random_normal(int rows, int cols, NormalGenerator& gen) {
    Matrix m(rows, cols);
    for (auto& v : m.data) v = gen.next();
    return m;
}

struct QkvTensors {
    Matrix q, k, v;
};

/// Q, then K, then V, row-major, from one generator stream.
inline QkvTensors random_qkv(int seq_len, int head_dim, std::uint64_t seed) {
    NormalGenerator gen(seed);
    QkvTensors t;
    t.q = random_normal(seq_len, head_dim, gen);
    t.k = random_normal(seq_len, head_dim, gen);
    t.v = random_normal(seq_len, head_dim, gen);
    return t;
}

inline double default_scale(int head_dim) { return 1.0 / std::sqrt(static_cast<double>(head_dim)); }

inline void check_qkv_shapes(const Matrix& q, const Matrix& k, const Matrix& v) {
    if (q.rows < 1 || q.cols < 1) throw std::invalid_argument("attention: Q must be non-empty");
    if (k.rows != q.rows || k.cols != q.cols || v.rows != q.rows || v.cols != q.cols)
        throw std::invalid_argument("attention: shape mismatch, Q is " + std::to_string(q.rows) + "x" +
                                    std::to_string(q.cols) + ", K is " + std::to_string(k.rows) + "x" +
                                    std::to_string(k.cols) + ", V is " + std::to_string(v.rows) + "x" +
                                    std::to_string(v.cols));
}

/// Row-wise softmax(scale Q K^T) in long double. Returned for inspection by tests.
inline std::vector<std::vector<long double>> reference_softmax(const Matrix& q, const Matrix& k, double scale) {
    const int n = q.rows, d = q.cols;
    std::vector<std::vector<long double>> p(static_cast<std::size_t>(n), std::vector<long double>(static_cast<std::size_t>(n)));
    for (int i = 0; i < n; ++i) {
        auto& row = p[static_cast<std::size_t>(i)];
        long double mx = -std::numeric_limits<long double>::infinity();
        for (int j = 0; j < n; ++j) {
            long double acc = 0;
            for (int c = 0; c < d; ++c) acc += static_cast<long double>(q(i, c)) * k(j, c);
            row[static_cast<std::size_t>(j)] = acc * scale;
            mx = std::max(mx, row[static_cast<std::size_t>(j)]);
        }
        long double sum = 0;
        for (auto& x : row) {
            x = std::exp(x - mx);
            sum += x;
        }
        for (auto& x : row) x /= sum;
    }
    return p;
}

/// Two-pass attention over the full S x S score matrix.
inline Matrix reference_attention(const Matrix& q, const Matrix& k, const Matrix& v, double scale) {
    check_qkv_shapes(q, k, v);
    const auto p = reference_softmax(q, k, scale);
    const int n = q.rows, d = q.cols;
    Matrix o(n, d);
    for (int i = 0; i < n; ++i) {
        for (int c = 0; c < d; ++c) {
            long double acc = 0;
            for (int j = 0; j < n; ++j) acc += p[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] * v(j, c);
            o(i, c) = static_cast<double>(acc);
        }
    }
    return o;
}

/// Block and slice geometry driving functional execution.
struct FunctionalSchedule {
    GroupShape group;
    int block_rows = 1;
    int block_cols = 1;

    static FunctionalSchedule from(const SlicePlan& sp) { return {sp.group, sp.block_rows, sp.block_cols}; }
};

/**
 * Architecture-free schedule for functional checks: the largest square group
 * no bigger than `group` whose edge divides S (1x1 for the FlashAttention
 * variants), and the largest slice no bigger than `max_slice` that tiles S.
 * Small slices force several column blocks, so the rescaling path runs.
 */
inline FunctionalSchedule functional_schedule(DataflowKind kind, int seq_len, GroupShape group, int max_slice) {
    if (seq_len < 1 || max_slice < 1) throw std::invalid_argument("functional_schedule: sizes must be positive");
    GroupShape g{1, 1};
    if (is_flat(kind)) {
        g = group;
        while (seq_len % g.gx != 0) --g.gx;
        while (seq_len % g.gy != 0) --g.gy;
    }
    const int lim = std::min(seq_len / g.gx, seq_len / g.gy);
    int s = std::min(max_slice, lim);
    while (seq_len % (s * g.gx) != 0 || seq_len % (s * g.gy) != 0) --s;
    return {g, s * g.gy, s * g.gx};
}

enum class InjectedFault {
    none,
    skip_rescale,  ///< accumulate O without the exp(m_old - m_new) correction
};

struct FunctionalOptions {
    double scale = std::numeric_limits<double>::quiet_NaN();  ///< NaN selects 1/sqrt(D)
    bool check_invariants = true;
    InjectedFault fault = InjectedFault::none;
};

/// Raised when a running statistic drifts from its definition.
class InvariantViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

inline Matrix execute_functional(const FunctionalSchedule& sched, const Matrix& q, const Matrix& k, const Matrix& v,
                                 const FunctionalOptions& opts = {}) {
    check_qkv_shapes(q, k, v);
    const int S = q.rows, D = q.cols;
    const int gx = sched.group.gx, gy = sched.group.gy;
    if (gx < 1 || gy < 1 || sched.block_rows < 1 || sched.block_cols < 1)
        throw std::invalid_argument("execute_functional: schedule dimensions must be positive");
    if (S % sched.block_rows != 0 || S % sched.block_cols != 0)
        throw std::invalid_argument("execute_functional: blocks " + std::to_string(sched.block_rows) + "x" +
                                    std::to_string(sched.block_cols) + " do not divide S = " + std::to_string(S));
    if (sched.block_rows % gy != 0 || sched.block_cols % gx != 0)
        throw std::invalid_argument("execute_functional: group does not divide the block");
    const int sr = sched.block_rows / gy;
    const int sc = sched.block_cols / gx;
    const double scale = std::isnan(opts.scale) ? default_scale(D) : opts.scale;
    constexpr double kNegInf = -std::numeric_limits<double>::infinity();

    struct TileState {
        Matrix o;
        std::vector<double> m, l;
    };
    const auto ntiles = static_cast<std::size_t>(gx) * gy;
    std::vector<TileState> tiles(ntiles);
    std::vector<Matrix> scores(ntiles, Matrix(sr, sc));
    std::vector<double> partial(ntiles * static_cast<std::size_t>(sr));
    std::vector<double> true_max(static_cast<std::size_t>(sched.block_rows));
    Matrix out(S, D);

    for (int r0 = 0; r0 < S; r0 += sched.block_rows) {
        for (auto& t : tiles) {
            t.o = Matrix(sr, D);
            t.m.assign(static_cast<std::size_t>(sr), kNegInf);
            t.l.assign(static_cast<std::size_t>(sr), 0.0);
        }
        std::fill(true_max.begin(), true_max.end(), kNegInf);

        for (int c0 = 0; c0 < S; c0 += sched.block_cols) {
            // Score slices and local row maxima.
            for (int ly = 0; ly < gy; ++ly) {
                for (int lx = 0; lx < gx; ++lx) {
                    const auto ti = static_cast<std::size_t>(ly * gx + lx);
                    Matrix& s = scores[ti];
                    for (int r = 0; r < sr; ++r) {
                        const int qi = r0 + ly * sr + r;
                        double mx = kNegInf;
                        for (int c = 0; c < sc; ++c) {
                            const int kj = c0 + lx * sc + c;
                            double acc = 0;
                            for (int e = 0; e < D; ++e) acc += q(qi, e) * k(kj, e);
                            s(r, c) = acc * scale;
                            mx = std::max(mx, s(r, c));
                            true_max[static_cast<std::size_t>(ly * sr + r)] =
                                std::max(true_max[static_cast<std::size_t>(ly * sr + r)], s(r, c));
                        }
                        partial[ti * static_cast<std::size_t>(sr) + static_cast<std::size_t>(r)] = mx;
                    }
                }
            }
            // Row-wise max reduce + multicast, then per-tile tracking maxima.
            std::vector<std::vector<double>> m_new(ntiles);
            for (int ly = 0; ly < gy; ++ly) {
                for (int r = 0; r < sr; ++r) {
                    double g = kNegInf;
                    for (int lx = 0; lx < gx; ++lx)
                        g = std::max(g, partial[static_cast<std::size_t>(ly * gx + lx) * sr + static_cast<std::size_t>(r)]);
                    for (int lx = 0; lx < gx; ++lx) {
                        const auto ti = static_cast<std::size_t>(ly * gx + lx);
                        if (m_new[ti].empty()) m_new[ti].resize(static_cast<std::size_t>(sr));
                        m_new[ti][static_cast<std::size_t>(r)] = std::max(tiles[ti].m[static_cast<std::size_t>(r)], g);
                    }
                }
            }
            // P = exp(S - m_new), local denominators.
            for (std::size_t ti = 0; ti < ntiles; ++ti) {
                Matrix& s = scores[ti];
                for (int r = 0; r < sr; ++r) {
                    double sum = 0;
                    for (int c = 0; c < sc; ++c) {
                        s(r, c) = std::exp(s(r, c) - m_new[ti][static_cast<std::size_t>(r)]);
                        sum += s(r, c);
                    }
                    partial[ti * static_cast<std::size_t>(sr) + static_cast<std::size_t>(r)] = sum;
                }
            }
            // Row-wise sum reduce + multicast; rescale and accumulate O.
            for (int ly = 0; ly < gy; ++ly) {
                for (int r = 0; r < sr; ++r) {
                    double block_sum = 0;
                    for (int lx = 0; lx < gx; ++lx)
                        block_sum += partial[static_cast<std::size_t>(ly * gx + lx) * sr + static_cast<std::size_t>(r)];
                    for (int lx = 0; lx < gx; ++lx) {
                        auto& t = tiles[static_cast<std::size_t>(ly * gx + lx)];
                        const double mn = m_new[static_cast<std::size_t>(ly * gx + lx)][static_cast<std::size_t>(r)];
                        const double alpha = std::exp(t.m[static_cast<std::size_t>(r)] - mn);
                        t.l[static_cast<std::size_t>(r)] = alpha * t.l[static_cast<std::size_t>(r)] + block_sum;
                        t.m[static_cast<std::size_t>(r)] = mn;
                        const double o_scale = opts.fault == InjectedFault::skip_rescale ? 1.0 : alpha;
                        for (int e = 0; e < D; ++e) t.o(r, e) *= o_scale;
                    }
                }
            }
            for (int ly = 0; ly < gy; ++ly) {
                for (int lx = 0; lx < gx; ++lx) {
                    const auto ti = static_cast<std::size_t>(ly * gx + lx);
                    const Matrix& p = scores[ti];
                    Matrix& o = tiles[ti].o;
                    for (int r = 0; r < sr; ++r)
                        for (int c = 0; c < sc; ++c) {
                            const double w = p(r, c);
                            const int vj = c0 + lx * sc + c;
                            for (int e = 0; e < D; ++e) o(r, e) += w * v(vj, e);
                        }
                }
            }
            if (opts.check_invariants) {
                for (int ly = 0; ly < gy; ++ly)
                    for (int lx = 0; lx < gx; ++lx)
                        for (int r = 0; r < sr; ++r) {
                            const double tracked = tiles[static_cast<std::size_t>(ly * gx + lx)].m[static_cast<std::size_t>(r)];
                            if (tracked != true_max[static_cast<std::size_t>(ly * sr + r)])
                                throw InvariantViolation("running max of row " + std::to_string(r0 + ly * sr + r) +
                                                         " diverged from the max of processed scores");
                        }
            }
        }

        // Normalize each slice, then sum O slices across the row (O reduce).
        for (int ly = 0; ly < gy; ++ly) {
            for (int r = 0; r < sr; ++r) {
                const int row = r0 + ly * sr + r;
                for (int e = 0; e < D; ++e) {
                    double acc = 0;
                    for (int lx = 0; lx < gx; ++lx) {
                        const auto& t = tiles[static_cast<std::size_t>(ly * gx + lx)];
                        acc += t.o(r, e) / t.l[static_cast<std::size_t>(r)];
                    }
                    out(row, e) = acc;
                }
            }
        }
    }
    return out;
}

/// max |a - b| / max |ref|
inline double max_relative_error(const Matrix& a, const Matrix& ref) {
    if (a.rows != ref.rows || a.cols != ref.cols) throw std::invalid_argument("max_relative_error: shape mismatch");
    double diff = 0, mag = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double dv = std::abs(a.data[i] - ref.data[i]);
        diff = std::isnan(dv) ? std::numeric_limits<double>::infinity() : std::max(diff, dv);
        mag = std::max(mag, std::abs(ref.data[i]));
    }
    return mag > 0 ? diff / mag : diff;
}

}  // namespace flatsim

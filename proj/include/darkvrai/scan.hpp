#pragma once

// Selective state-space scan in burst order.
//
// Per token t the diagonal state h_t in R^{D x N} evolves as
//   h_t = Abar_t * h_{t-1} + Bbar_t * x_t,   h_{-1} = 0
//   y_t = sum_n C_t[n] h_t[:, n] + D_skip * x_t
// with zero-order hold Abar = exp(delta (x) A) and Euler Bbar = delta (x) B.
// The recurrence h_t = a_t h_{t-1} + b_t is evaluated either sequentially or
// as an associative scan over pairs (a, b), chunked with a work-efficient
// (Blelloch) tree across chunk aggregates.

#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "darkvrai/ops.hpp"
#include "darkvrai/parallel.hpp"
#include "darkvrai/params.hpp"
#include "darkvrai/tensor.hpp"

namespace darkvrai {

enum class ScanKernel { kSequential, kParallel };

struct ScanOptions {
  ScanKernel kernel = ScanKernel::kParallel;
  std::size_t chunk = 64;
  int threads = 1;
};

/// Element of the associative scan: the affine map h -> a*h + b.
struct ScanPair {
  double a = 1.0;
  double b = 0.0;
};

/// Applies `first`, then `second`.
constexpr ScanPair combine(const ScanPair& first, const ScanPair& second) {
  return {first.a * second.a, second.a * first.b + second.b};
}

/// h[t,s] = a[t,s] h[t-1,s] + b[t,s] for a [L,S] layout.
inline void recurrence_sequential(std::span<const double> a, std::span<const double> b, std::size_t L,
                                  std::size_t S, std::span<double> h) {
  std::vector<double> state(S, 0.0);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      state[s] = a[t * S + s] * state[s] + b[t * S + s];
      h[t * S + s] = state[s];
    }
}

/// Same contract as recurrence_sequential. Chunks are reduced and replayed in
/// parallel; the exclusive prefix over chunk aggregates is an up-sweep /
/// down-sweep tree. The tree shape depends only on L and the chunk size, so
/// results are independent of the thread count.
inline void recurrence_parallel(std::span<const double> a, std::span<const double> b, std::size_t L,
                                std::size_t S, std::span<double> h, std::size_t chunk, int threads) {
  if (chunk == 0) throw ConfigError("scan chunk size must be positive");
  const std::size_t nchunks = (L + chunk - 1) / chunk;
  std::size_t P = 1;
  while (P < nchunks) P <<= 1;
  std::vector<double> tree_a(P * S, 1.0), tree_b(P * S, 0.0);

  parallel_for(nchunks, threads, [&](std::size_t c) {
    double* ta = tree_a.data() + c * S;
    double* tb = tree_b.data() + c * S;
    const std::size_t t1 = std::min(L, (c + 1) * chunk);
    for (std::size_t t = c * chunk; t < t1; ++t)
      for (std::size_t s = 0; s < S; ++s) {
        const ScanPair r = combine({ta[s], tb[s]}, {a[t * S + s], b[t * S + s]});
        ta[s] = r.a;
        tb[s] = r.b;
      }
  });

  auto combine_into = [&](std::size_t first, std::size_t second) {
    for (std::size_t s = 0; s < S; ++s) {
      const ScanPair r = combine({tree_a[first * S + s], tree_b[first * S + s]},
                                 {tree_a[second * S + s], tree_b[second * S + s]});
      tree_a[second * S + s] = r.a;
      tree_b[second * S + s] = r.b;
    }
  };
  for (std::size_t d = 1; d < P; d <<= 1)
    for (std::size_t k = 0; k < P; k += 2 * d) combine_into(k + d - 1, k + 2 * d - 1);
  for (std::size_t s = 0; s < S; ++s) {
    tree_a[(P - 1) * S + s] = 1.0;
    tree_b[(P - 1) * S + s] = 0.0;
  }
  for (std::size_t d = P >> 1; d >= 1; d >>= 1) {
    for (std::size_t k = 0; k < P; k += 2 * d) {
      const std::size_t left = k + d - 1, right = k + 2 * d - 1;
      for (std::size_t s = 0; s < S; ++s) {
        const ScanPair prefix{tree_a[right * S + s], tree_b[right * S + s]};
        const ScanPair left_total{tree_a[left * S + s], tree_b[left * S + s]};
        const ScanPair r = combine(prefix, left_total);
        tree_a[left * S + s] = prefix.a;
        tree_b[left * S + s] = prefix.b;
        tree_a[right * S + s] = r.a;
        tree_b[right * S + s] = r.b;
      }
    }
    if (d == 1) break;
  }

  parallel_for(nchunks, threads, [&](std::size_t c) {
    std::vector<double> state(tree_b.begin() + c * S, tree_b.begin() + (c + 1) * S);
    const std::size_t t1 = std::min(L, (c + 1) * chunk);
    for (std::size_t t = c * chunk; t < t1; ++t)
      for (std::size_t s = 0; s < S; ++s) {
        state[s] = a[t * S + s] * state[s] + b[t * S + s];
        h[t * S + s] = state[s];
      }
  });
}

inline void run_recurrence(std::span<const double> a, std::span<const double> b, std::size_t L, std::size_t S,
                           std::span<double> h, const ScanOptions& opt) {
  if (opt.kernel == ScanKernel::kSequential) {
    recurrence_sequential(a, b, L, S, h);
  } else {
    recurrence_parallel(a, b, L, S, h, opt.chunk, opt.threads);
  }
}

// ---------------------------------------------------------------------------

template <typename T>
struct Discretized {
  Tensor<T> a_bar;  // [L,D,N]
  Tensor<T> b_bar;  // [L,D,N]
};

/// Abar = exp(delta (x) A), Bbar = delta (x) B for delta [L,D], A [D,N], B [L,N].
template <typename T>
Discretized<T> discretize(const Tensor<T>& delta, const Tensor<T>& A, const Tensor<T>& B) {
  if (delta.dim() != 2 || A.dim() != 2 || B.dim() != 2 || A.size(0) != delta.size(1) || B.size(0) != delta.size(0) ||
      B.size(1) != A.size(1)) {
    throw ShapeError("discretize: expected delta [L,D], A [D,N], B [L,N]; got " + shape_string(delta.shape()) + ", " +
                     shape_string(A.shape()) + ", " + shape_string(B.shape()));
  }
  const std::size_t L = delta.size(0), D = delta.size(1), N = A.size(1);
  std::vector<T> abar(L * D * N), bbar(L * D * N);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t d = 0; d < D; ++d) {
      const double dt = delta[t * D + d];
      if (dt <= 0) throw ShapeError("discretize: step size delta must be positive, got " + std::to_string(dt));
      for (std::size_t n = 0; n < N; ++n) {
        abar[(t * D + d) * N + n] = static_cast<T>(std::exp(dt * A[d * N + n]));
        bbar[(t * D + d) * N + n] = static_cast<T>(dt * B[t * N + n]);
      }
    }
  return {Tensor<T>({L, D, N}, std::move(abar)), Tensor<T>({L, D, N}, std::move(bbar))};
}

/// Scan from already-discretized coefficients (no gradient). Abar, Bbar [L,D,N],
/// C [L,N], x [L,D], D_skip [D].
template <typename T>
Tensor<T> scan_discrete(const Tensor<T>& a_bar, const Tensor<T>& b_bar, const Tensor<T>& C, const Tensor<T>& x,
                        const Tensor<T>& d_skip, const ScanOptions& opt = {}) {
  if (x.dim() != 2 || x.size(0) == 0) throw ShapeError("scan: empty or malformed token sequence " + shape_string(x.shape()));
  const std::size_t L = x.size(0), D = x.size(1), N = C.size(1);
  if (a_bar.shape() != Shape{L, D, N} || b_bar.shape() != Shape{L, D, N} || C.shape() != Shape{L, N} ||
      d_skip.shape() != Shape{D}) {
    throw ShapeError("scan_discrete: inconsistent shapes");
  }
  const std::size_t S = D * N;
  std::vector<double> a(L * S), b(L * S), h(L * S);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t n = 0; n < N; ++n) {
        const std::size_t i = (t * D + d) * N + n;
        a[i] = a_bar[i];
        b[i] = static_cast<double>(b_bar[i]) * x[t * D + d];
      }
  run_recurrence(a, b, L, S, h, opt);
  std::vector<T> y(L * D);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t d = 0; d < D; ++d) {
      double acc = static_cast<double>(d_skip[d]) * x[t * D + d];
      for (std::size_t n = 0; n < N; ++n) acc += static_cast<double>(C[t * N + n]) * h[(t * D + d) * N + n];
      y[t * D + d] = static_cast<T>(acc);
    }
  return Tensor<T>({L, D}, std::move(y));
}

/// Differentiable selective scan. x, delta [L,D]; A [D,N] (negative);
/// B, C [L,N]; d_skip [D] -> y [L,D]. The backward pass walks the sequential
/// recurrence in reverse over the states kept from the forward pass.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& A, const Tensor<T>& B,
                         const Tensor<T>& C, const Tensor<T>& d_skip, const ScanOptions& opt = {}) {
  if (x.dim() != 2 || x.size(0) == 0) throw ShapeError("scan: empty or malformed token sequence " + shape_string(x.shape()));
  const std::size_t L = x.size(0), D = x.size(1);
  if (A.dim() != 2 || A.size(0) != D) throw ShapeError("scan: A must be [D,N], got " + shape_string(A.shape()));
  const std::size_t N = A.size(1);
  if (delta.shape() != x.shape() || B.shape() != Shape{L, N} || C.shape() != Shape{L, N} || d_skip.shape() != Shape{D}) {
    throw ShapeError("scan: inconsistent shapes x " + shape_string(x.shape()) + ", delta " + shape_string(delta.shape()) +
                     ", B " + shape_string(B.shape()) + ", C " + shape_string(C.shape()) + ", D " +
                     shape_string(d_skip.shape()));
  }
  for (T v : A.data())
    if (!(v < 0)) throw ShapeError("scan: state matrix A must be strictly negative");
  const std::size_t S = D * N;
  auto abar = std::make_shared<std::vector<double>>(L * S);
  std::vector<double> bx(L * S);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t d = 0; d < D; ++d) {
      const double dt = delta[t * D + d];
      // NaN passes through so a diverging run surfaces as a non-finite loss.
      if (dt <= 0) throw ShapeError("scan: step size delta must be positive, got " + std::to_string(dt));
      const double xv = x[t * D + d];
      for (std::size_t n = 0; n < N; ++n) {
        const std::size_t i = (t * D + d) * N + n;
        (*abar)[i] = std::exp(dt * A[d * N + n]);
        bx[i] = dt * B[t * N + n] * xv;
      }
    }
  auto h = std::make_shared<std::vector<double>>(L * S);
  run_recurrence(*abar, bx, L, S, *h, opt);
  std::vector<T> y(L * D);
  for (std::size_t t = 0; t < L; ++t)
    for (std::size_t d = 0; d < D; ++d) {
      double acc = static_cast<double>(d_skip[d]) * x[t * D + d];
      for (std::size_t n = 0; n < N; ++n) acc += static_cast<double>(C[t * N + n]) * (*h)[(t * D + d) * N + n];
      y[t * D + d] = static_cast<T>(acc);
    }

  return detail::record<T>(
      Shape{L, D}, std::move(y), {x, delta, A, B, C, d_skip},
      [x, delta, A, B, C, d_skip, abar, h, L, D, N](std::span<const T> gy) {
        std::vector<double> gx(L * D, 0.0), gdelta(L * D, 0.0), gA(D * N, 0.0), gB(L * N, 0.0), gC(L * N, 0.0),
            gD(D, 0.0);
        std::vector<double> gh(D * N, 0.0), gh_next(D * N, 0.0);
        for (std::size_t t = L; t-- > 0;) {
          for (std::size_t d = 0; d < D; ++d) {
            const double g = gy[t * D + d];
            const double xv = x[t * D + d];
            gx[t * D + d] += g * d_skip[d];
            gD[d] += g * xv;
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t k = d * N + n;
              double v = g * C[t * N + n];
              if (t + 1 < L) v += (*abar)[((t + 1) * D + d) * N + n] * gh_next[k];
              gh[k] = v;
              gC[t * N + n] += g * (*h)[(t * D + d) * N + n];
            }
          }
          for (std::size_t d = 0; d < D; ++d) {
            const double dt = delta[t * D + d];
            const double xv = x[t * D + d];
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t k = d * N + n;
              const std::size_t i = (t * D + d) * N + n;
              const double hprev = t > 0 ? (*h)[((t - 1) * D + d) * N + n] : 0.0;
              const double ga = gh[k] * hprev * (*abar)[i];
              const double bn = B[t * N + n];
              gdelta[t * D + d] += ga * A[k] + gh[k] * bn * xv;
              gA[k] += ga * dt;
              gB[t * N + n] += gh[k] * dt * xv;
              gx[t * D + d] += gh[k] * dt * bn;
            }
          }
          std::swap(gh, gh_next);
        }
        auto flush = [](const Tensor<T>& t, const std::vector<double>& g) {
          if (auto s = detail::grad_sink(t); !s.empty())
            for (std::size_t i = 0; i < g.size(); ++i) s[i] += static_cast<T>(g[i]);
        };
        flush(x, gx);
        flush(delta, gdelta);
        flush(A, gA);
        flush(B, gB);
        flush(C, gC);
        flush(d_skip, gD);
      });
}

// ---------------------------------------------------------------------------
// Burst-order layout

/// Tokens [T*H*W, D]; token t*H*W + h*W + w is frame t, row h, column w.
template <typename T>
struct BurstSequence {
  Tensor<T> tokens;
  std::size_t frames = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t length() const { return frames * height * width; }
};

template <typename T>
BurstSequence<T> burst_flatten(const Tensor<T>& features) {
  detail::require_rank(features, 4, "burst_flatten");
  return {to_tokens(features), features.size(0), features.size(2), features.size(3)};
}

template <typename T>
Tensor<T> burst_unflatten(const BurstSequence<T>& seq) {
  return from_tokens(seq.tokens, seq.frames, seq.height, seq.width);
}

/// Learned parameters of one selective scan over D channels with state size N.
template <typename T>
struct SelectiveScanParams {
  std::size_t channels = 0;
  std::size_t state = 0;
  Tensor<T> a_log;         // [D,N], A = -exp(a_log)
  Tensor<T> d_skip;        // [D]
  Tensor<T> delta_weight;  // [D,D]
  Tensor<T> delta_bias;    // [D]
  Tensor<T> b_weight;      // [N,D]
  Tensor<T> c_weight;      // [N,D]

  static SelectiveScanParams create(ParameterSet<T>& ps, const std::string& prefix, std::size_t channels,
                                    std::size_t state) {
    if (channels == 0 || state == 0) throw ConfigError("scan: channels and state size must be positive");
    SelectiveScanParams p;
    p.channels = channels;
    p.state = state;
    // A[d,n] = -(n+1), the usual S4D-real initialization.
    p.a_log = ps.create(prefix + ".a_log", {channels, state}, [state](std::span<T> v, Rng&) {
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(std::log(static_cast<double>(i % state + 1)));
    });
    p.d_skip = ps.constant(prefix + ".d_skip", {channels}, 1.0);
    p.delta_weight = ps.uniform(prefix + ".delta.weight", {channels, channels}, channels);
    // softplus(bias) log-uniform in [1e-3, 1e-1].
    p.delta_bias = ps.create(prefix + ".delta.bias", {channels}, [](std::span<T> v, Rng& rng) {
      std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
      for (auto& x : v) {
        const double dt = std::exp(u(rng));
        x = static_cast<T>(dt + std::log(-std::expm1(-dt)));
      }
    });
    p.b_weight = ps.uniform(prefix + ".b_proj.weight", {state, channels}, channels);
    p.c_weight = ps.uniform(prefix + ".c_proj.weight", {state, channels}, channels);
    return p;
  }

  Tensor<T> state_matrix() const { return neg(exp(a_log)); }
};

/// Selective scan of a burst sequence with input-dependent delta, B and C.
template <typename T>
Tensor<T> selective_scan(const BurstSequence<T>& seq, const SelectiveScanParams<T>& p, const ScanOptions& opt) {
  if (seq.tokens.dim() != 2 || seq.tokens.size(0) == 0) throw ShapeError("scan: empty sequence");
  if (seq.tokens.size(1) != p.channels) {
    throw ShapeError("scan: token width " + std::to_string(seq.tokens.size(1)) + " does not match scan channels " +
                     std::to_string(p.channels));
  }
  const auto& x = seq.tokens;
  auto delta = softplus(linear(x, p.delta_weight, p.delta_bias));
  auto B = linear(x, p.b_weight);
  auto C = linear(x, p.c_weight);
  return selective_scan(x, delta, p.state_matrix(), B, C, p.d_skip, opt);
}

template <typename T>
Tensor<T> scan_sequential(const BurstSequence<T>& seq, const SelectiveScanParams<T>& p) {
  return selective_scan(seq, p, ScanOptions{ScanKernel::kSequential, 64, 1});
}

template <typename T>
Tensor<T> scan_parallel(const BurstSequence<T>& seq, const SelectiveScanParams<T>& p, std::size_t chunk = 64,
                        int threads = 1) {
  return selective_scan(seq, p, ScanOptions{ScanKernel::kParallel, chunk, threads});
}

}  // namespace darkvrai

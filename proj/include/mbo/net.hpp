#ifndef MBO_NET_HPP
#define MBO_NET_HPP

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mbo/errors.hpp"
#include "mbo/matrix.hpp"
#include "mbo/rng.hpp"

namespace mbo {

/// Shape of the fixed network family.
///
///   z   = [x ; label_embedding]                   (label part only when label_embed_dim > 0)
///   h0  = z W_in + b_in                            (linear projection to hidden_width)
///   for each of hidden_depth / 2 residual blocks:
///     a   = silu(h W_a + b_a + e(t) P)              (P only when time_embed_dim > 0)
///     h  += silu(a W_b + b_b)
///   out = h W_out + b_out
///
/// The label embedding of a scalar y is y * s + c with learned vectors s, c. A
/// row flagged as dropped uses a separate learned null vector instead.
/// `h` after the last block is the embedding exposed to the metrics.
struct NetConfig {
  std::size_t input_dim = 1;
  std::size_t hidden_width = 128;
  std::size_t hidden_depth = 4;
  std::size_t time_embed_dim = 0;   // 0: no timestep input
  std::size_t label_embed_dim = 0;  // 0: no label input
  bool has_null_token = false;
  std::size_t output_dim = 1;

  bool uses_time() const { return time_embed_dim > 0; }
  bool uses_label() const { return label_embed_dim > 0; }
  std::size_t blocks() const { return hidden_depth / 2; }

  void validate() const {
    if (input_dim == 0 || hidden_width == 0 || output_dim == 0) throw ConfigError("net: dimensions must be positive");
    if (hidden_depth < 2 || hidden_depth % 2 != 0) throw ConfigError("net: hidden_depth must be an even number >= 2");
    if (time_embed_dim % 2 != 0) throw ConfigError("net: time_embed_dim must be even");
    if (has_null_token && !uses_label()) throw ConfigError("net: a null token needs a label embedding");
  }

  bool operator==(const NetConfig&) const = default;
};

struct ParamLayout {
  struct Block {
    std::size_t wa, ba, pt, wb, bb;
  };
  std::size_t label_scale = 0, label_shift = 0, null_embed = 0;
  std::size_t in_w = 0, in_b = 0;
  std::vector<Block> blocks;
  std::size_t out_w = 0, out_b = 0;
  std::size_t total = 0;

  explicit ParamLayout(const NetConfig& c) {
    c.validate();
    std::size_t off = 0;
    auto take = [&off](std::size_t n) {
      const std::size_t at = off;
      off += n;
      return at;
    };
    const std::size_t label = c.label_embed_dim;
    label_scale = take(label);
    label_shift = take(label);
    null_embed = take(c.has_null_token ? label : 0);
    const std::size_t w = c.hidden_width;
    in_w = take((c.input_dim + label) * w);
    in_b = take(w);
    for (std::size_t b = 0; b < c.blocks(); ++b) {
      Block blk{};
      blk.wa = take(w * w);
      blk.ba = take(w);
      blk.pt = take(c.time_embed_dim * w);
      blk.wb = take(w * w);
      blk.bb = take(w);
      blocks.push_back(blk);
    }
    out_w = take(w * c.output_dim);
    out_b = take(c.output_dim);
    total = off;
  }
};

inline std::size_t param_count(const NetConfig& c) { return ParamLayout(c).total; }

struct NetParams {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  bool operator==(const NetParams&) const = default;
};

inline NetParams zero_params(const NetConfig& c) { return {std::vector<double>(param_count(c), 0.0)}; }

// Weights uniform in +-1/sqrt(fan_in), biases and the label shift zero.
inline NetParams init_params(const NetConfig& c, std::uint64_t seed) {
  const ParamLayout L(c);
  NetParams p = zero_params(c);
  Rng rng(seed);
  auto fill = [&](std::size_t at, std::size_t n, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < n; ++i) p.values[at + i] = rng.uniform(-bound, bound);
  };
  const std::size_t w = c.hidden_width;
  fill(L.label_scale, c.label_embed_dim, 1);
  if (c.has_null_token) fill(L.null_embed, c.label_embed_dim, 1);
  fill(L.in_w, (c.input_dim + c.label_embed_dim) * w, c.input_dim + c.label_embed_dim);
  for (const auto& blk : L.blocks) {
    fill(blk.wa, w * w, w);
    if (c.uses_time()) fill(blk.pt, c.time_embed_dim * w, c.time_embed_dim);
    fill(blk.wb, w * w, w);
  }
  fill(L.out_w, w * c.output_dim, w);
  return p;
}

// Interleaved sin/cos at frequencies 10000^(-j / (dim/2)), j = 0 .. dim/2 - 1.
inline std::vector<double> time_embedding(int t, std::size_t dim) {
  if (dim % 2 != 0) throw ConfigError("time embedding dimension must be even");
  std::vector<double> e(dim);
  const std::size_t half = dim / 2;
  for (std::size_t j = 0; j < half; ++j) {
    const double freq = std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(half));
    e[2 * j] = std::sin(static_cast<double>(t) * freq);
    e[2 * j + 1] = std::cos(static_cast<double>(t) * freq);
  }
  return e;
}

inline double silu(double z) { return z / (1.0 + std::exp(-z)); }
inline double silu_grad(double z) {
  const double s = 1.0 / (1.0 + std::exp(-z));
  return s * (1.0 + z * (1.0 - s));
}

/// Conditioning for one batch. `t` is required iff the net uses time. For a
/// labelled net every row needs either a label (`y`) or a set `drop` flag.
struct NetInput {
  std::span<const int> t = {};
  std::span<const double> y = {};
  std::span<const std::uint8_t> drop = {};
};

struct Tape {
  Matrix z;                    // input incl. label embedding
  Matrix temb;                 // time embeddings, n x time_embed_dim
  std::vector<Matrix> stream;  // residual stream entering each block; back() is the embedding
  std::vector<Matrix> pre_a, act_a, pre_b;
  Matrix out;
};

namespace detail {

inline void check_input(const NetConfig& c, const Matrix& x, const NetInput& in) {
  const std::size_t n = x.rows();
  if (x.cols() != c.input_dim)
    throw ArgumentError("net: expected " + std::to_string(c.input_dim) + " input features, got " +
                        std::to_string(x.cols()));
  if (c.uses_time() && in.t.size() != n) throw ArgumentError("net: timestep batch does not match input rows");
  if (!c.uses_time() && !in.t.empty()) throw ArgumentError("net: timesteps given to a net without time input");
  if (c.uses_label()) {
    if (!in.drop.empty() && in.drop.size() != n) throw ArgumentError("net: drop flags do not match input rows");
    if (!in.drop.empty() && !c.has_null_token) throw ArgumentError("net: drop flags given to a net without null token");
    const bool all_dropped = !in.drop.empty() && std::ranges::all_of(in.drop, [](auto f) { return f != 0; });
    if (!all_dropped && in.y.size() != n) throw ArgumentError("net: label batch does not match input rows");
  } else if (!in.y.empty() || !in.drop.empty()) {
    throw ArgumentError("net: labels given to a net without label input");
  }
}

inline bool dropped(const NetInput& in, std::size_t i) { return !in.drop.empty() && in.drop[i] != 0; }

inline void add_column_sums(const Matrix& m, double* acc) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto r = m.row(i);
    for (std::size_t j = 0; j < m.cols(); ++j) acc[j] += r[j];
  }
}

// m * W^T for W stored rows x cols inside a flat vector.
inline Matrix times_transposed(const Matrix& m, const double* w, std::size_t w_rows, std::size_t w_cols) {
  Matrix wt(w_cols, w_rows);
  for (std::size_t r = 0; r < w_rows; ++r)
    for (std::size_t c = 0; c < w_cols; ++c) wt(c, r) = w[r * w_cols + c];
  return matmul(m, wt);
}

}  // namespace detail

inline Tape forward_tape(const NetParams& p, const NetConfig& c, const Matrix& x, const NetInput& in = {}) {
  detail::check_input(c, x, in);
  const ParamLayout L(c);
  if (p.size() != L.total) throw ArgumentError("net: parameter count does not match config");
  const double* P = p.values.data();
  const std::size_t n = x.rows(), d = c.input_dim, le = c.label_embed_dim, w = c.hidden_width;

  Tape tape;
  tape.z = Matrix(n, d + le);
  for (std::size_t i = 0; i < n; ++i) {
    auto zr = tape.z.row(i);
    const auto xr = x.row(i);
    std::copy(xr.begin(), xr.end(), zr.begin());
    for (std::size_t k = 0; k < le; ++k)
      zr[d + k] = detail::dropped(in, i) ? P[L.null_embed + k] : in.y[i] * P[L.label_scale + k] + P[L.label_shift + k];
  }
  if (c.uses_time()) {
    tape.temb = Matrix(n, c.time_embed_dim);
    for (std::size_t i = 0; i < n; ++i) {
      const auto e = time_embedding(in.t[i], c.time_embed_dim);
      std::ranges::copy(e, tape.temb.row(i).begin());
    }
  }
  tape.stream.push_back(matmul(tape.z, P + L.in_w, w, P + L.in_b));
  for (const auto& blk : L.blocks) {
    const Matrix& h = tape.stream.back();
    Matrix pre_a = matmul(h, P + blk.wa, w, P + blk.ba);
    if (c.uses_time()) {
      const Matrix tproj = matmul(tape.temb, P + blk.pt, w, nullptr);
      for (std::size_t i = 0; i < pre_a.size(); ++i) pre_a.data()[i] += tproj.data()[i];
    }
    Matrix act_a(n, w);
    for (std::size_t i = 0; i < pre_a.size(); ++i) act_a.data()[i] = silu(pre_a.data()[i]);
    Matrix pre_b = matmul(act_a, P + blk.wb, w, P + blk.bb);
    Matrix next = h;
    for (std::size_t i = 0; i < next.size(); ++i) next.data()[i] += silu(pre_b.data()[i]);
    tape.pre_a.push_back(std::move(pre_a));
    tape.act_a.push_back(std::move(act_a));
    tape.pre_b.push_back(std::move(pre_b));
    tape.stream.push_back(std::move(next));
  }
  tape.out = matmul(tape.stream.back(), P + L.out_w, c.output_dim, P + L.out_b);
  return tape;
}

inline Matrix forward(const NetParams& p, const NetConfig& c, const Matrix& x, const NetInput& in = {}) {
  return forward_tape(p, c, x, in).out;
}

// Penultimate representation: the residual stream fed to the output head.
inline Matrix embed(const NetParams& p, const NetConfig& c, const Matrix& x, const NetInput& in = {}) {
  return std::move(forward_tape(p, c, x, in).stream.back());
}

struct Gradients {
  std::vector<double> params;
  Matrix input;  // d loss / d x, n x input_dim
};

/// Reverse pass given d loss / d output.
inline Gradients backward(const NetParams& p, const NetConfig& c, const Tape& tape, const NetInput& in,
                          const Matrix& d_out) {
  const ParamLayout L(c);
  const double* P = p.values.data();
  const std::size_t n = tape.out.rows(), d = c.input_dim, le = c.label_embed_dim, w = c.hidden_width;
  if (d_out.rows() != n || d_out.cols() != c.output_dim) throw ArgumentError("backward: output gradient shape");

  Gradients g{std::vector<double>(L.total, 0.0), Matrix()};
  double* G = g.params.data();

  add_transposed_product(tape.stream.back(), d_out, G + L.out_w);
  detail::add_column_sums(d_out, G + L.out_b);
  Matrix dh = detail::times_transposed(d_out, P + L.out_w, w, c.output_dim);

  for (std::size_t bi = L.blocks.size(); bi-- > 0;) {
    const auto& blk = L.blocks[bi];
    Matrix dpre_b(n, w);
    for (std::size_t i = 0; i < dpre_b.size(); ++i)
      dpre_b.data()[i] = dh.data()[i] * silu_grad(tape.pre_b[bi].data()[i]);
    add_transposed_product(tape.act_a[bi], dpre_b, G + blk.wb);
    detail::add_column_sums(dpre_b, G + blk.bb);
    Matrix dpre_a = detail::times_transposed(dpre_b, P + blk.wb, w, w);
    for (std::size_t i = 0; i < dpre_a.size(); ++i) dpre_a.data()[i] *= silu_grad(tape.pre_a[bi].data()[i]);
    add_transposed_product(tape.stream[bi], dpre_a, G + blk.wa);
    detail::add_column_sums(dpre_a, G + blk.ba);
    if (c.uses_time()) add_transposed_product(tape.temb, dpre_a, G + blk.pt);
    const Matrix through = detail::times_transposed(dpre_a, P + blk.wa, w, w);
    for (std::size_t i = 0; i < dh.size(); ++i) dh.data()[i] += through.data()[i];
  }

  add_transposed_product(tape.z, dh, G + L.in_w);
  detail::add_column_sums(dh, G + L.in_b);
  const Matrix dz = detail::times_transposed(dh, P + L.in_w, d + le, w);

  g.input = Matrix(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const auto dzr = dz.row(i);
    std::copy(dzr.begin(), dzr.begin() + static_cast<std::ptrdiff_t>(d), g.input.row(i).begin());
    for (std::size_t k = 0; k < le; ++k) {
      const double dl = dzr[d + k];
      if (detail::dropped(in, i)) {
        G[L.null_embed + k] += dl;
      } else {
        G[L.label_scale + k] += dl * in.y[i];
        G[L.label_shift + k] += dl;
      }
    }
  }
  return g;
}

// Loss head: maps the network output to (loss, d loss / d output).
struct HeadLoss {
  double loss;
  Matrix d_output;
};

struct LossGradient {
  double loss;
  std::vector<double> grad;
};

template <class HeadFn>
  requires std::invocable<HeadFn, const Matrix&>
LossGradient grad_params(const NetParams& p, const NetConfig& c, const Matrix& x, const NetInput& in, HeadFn&& head,
                         const std::string& stage = "loss") {
  const Tape tape = forward_tape(p, c, x, in);
  HeadLoss hl = head(tape.out);
  if (!std::isfinite(hl.loss)) throw NumericError(stage, "non-finite loss");
  auto g = backward(p, c, tape, in, hl.d_output);
  if (!all_finite(g.params)) throw NumericError(stage, "non-finite gradient");
  return {hl.loss, std::move(g.params)};
}

/// Gradient of the (scalar) output with respect to the inputs, one row per example.
inline Matrix grad_input(const NetParams& p, const NetConfig& c, const Matrix& x, const NetInput& in = {}) {
  if (c.output_dim != 1) throw ArgumentError("grad_input: network must have a scalar output");
  const Tape tape = forward_tape(p, c, x, in);
  Matrix g = backward(p, c, tape, in, Matrix(x.rows(), 1, 1.0)).input;
  if (!all_finite(g.storage())) throw NumericError("input gradient", "non-finite gradient");
  return g;
}

// Mean squared error head for an n x k output against an n x k target.
inline HeadLoss mse_head(const Matrix& out, const Matrix& target) {
  if (out.rows() != target.rows() || out.cols() != target.cols()) throw ArgumentError("mse: shape mismatch");
  HeadLoss hl{0.0, Matrix(out.rows(), out.cols())};
  const double scale = 1.0 / static_cast<double>(out.rows());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double r = out.data()[i] - target.data()[i];
    hl.loss += r * r;
    hl.d_output.data()[i] = 2.0 * r * scale;
  }
  hl.loss *= scale;
  return hl;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamOptions {
  double lr = 2e-5;
  double beta1 = 0.0;
  double beta2 = 0.9;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m, v;
  std::uint64_t step = 0;
  AdamOptions options;

  AdamState() = default;
  AdamState(std::size_t n, AdamOptions opt) : m(n, 0.0), v(n, 0.0), options(opt) {}
};

inline void adam_update(NetParams& p, std::span<const double> grads, AdamState& s) {
  if (grads.size() != p.size() || s.m.size() != p.size() || s.v.size() != p.size())
    throw ArgumentError("adam: parameter, gradient and moment sizes differ");
  if (!all_finite(grads)) throw NumericError("adam", "non-finite gradient");
  const auto& o = s.options;
  ++s.step;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < p.size(); ++i) {
    s.m[i] = o.beta1 * s.m[i] + (1.0 - o.beta1) * grads[i];
    s.v[i] = o.beta2 * s.v[i] + (1.0 - o.beta2) * grads[i] * grads[i];
    const double m_hat = s.m[i] / bc1;
    const double v_hat = s.v[i] / bc2;
    p.values[i] -= o.lr * m_hat / (std::sqrt(v_hat) + o.eps);
  }
}

inline std::pair<NetParams, AdamState> adam_step(NetParams p, std::span<const double> grads, AdamState s) {
  adam_update(p, grads, s);
  return {std::move(p), std::move(s)};
}

// Rescales `g` in place so its Euclidean norm is at most `max_norm`. Returns the original norm.
inline double clip_global_norm(std::vector<double>& g, double max_norm) {
  const double norm = std::sqrt(squared_norm(g));
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (double& v : g) v *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Checkpoint container:
//   "MBOV1\n", "key=value\n" header lines, "end\n", then the parameters as
//   little-endian IEEE-754 binary64.

struct Checkpoint {
  std::string role;  // diffusion, oracle, guidance
  NetConfig config;
  NetParams params;
  std::map<std::string, std::string> extra;  // role-specific metadata
};

namespace detail {
inline void put_le(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), 8);
}
inline double get_le(const unsigned char* buf) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}
}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  if (ck.params.size() != param_count(ck.config)) throw ArgumentError("checkpoint: parameter count mismatch");
  const auto& c = ck.config;
  os << "MBOV1\n";
  os << "role=" << ck.role << '\n';
  os << "input_dim=" << c.input_dim << '\n';
  os << "hidden_width=" << c.hidden_width << '\n';
  os << "hidden_depth=" << c.hidden_depth << '\n';
  os << "time_embed_dim=" << c.time_embed_dim << '\n';
  os << "label_embed_dim=" << c.label_embed_dim << '\n';
  os << "has_null_token=" << (c.has_null_token ? 1 : 0) << '\n';
  os << "output_dim=" << c.output_dim << '\n';
  os << "param_count=" << ck.params.size() << '\n';
  for (const auto& [k, v] : ck.extra) os << "x." << k << '=' << v << '\n';
  os << "end\n";
  for (double v : ck.params.values) detail::put_le(os, v);
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw MissingArtifact("cannot write checkpoint '" + path + "'");
  write_checkpoint(os, ck);
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "MBOV1") throw ParseError("checkpoint: bad magic", 1);
  Checkpoint ck;
  std::map<std::string, std::string> kv;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line == "end") break;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("checkpoint: malformed header line", line_no);
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key.starts_with("x."))
      ck.extra[key.substr(2)] = val;
    else
      kv[key] = val;
  }
  if (line != "end") throw ParseError("checkpoint: header not terminated", line_no);
  auto num = [&](const std::string& key) -> std::size_t {
    const auto it = kv.find(key);
    if (it == kv.end()) throw ParseError("checkpoint: missing header key '" + key + "'", line_no);
    try {
      return static_cast<std::size_t>(std::stoull(it->second));
    } catch (const std::exception&) {
      throw ParseError("checkpoint: header key '" + key + "' is not an integer", line_no);
    }
  };
  ck.role = kv.count("role") ? kv["role"] : "";
  ck.config.input_dim = num("input_dim");
  ck.config.hidden_width = num("hidden_width");
  ck.config.hidden_depth = num("hidden_depth");
  ck.config.time_embed_dim = num("time_embed_dim");
  ck.config.label_embed_dim = num("label_embed_dim");
  ck.config.has_null_token = num("has_null_token") != 0;
  ck.config.output_dim = num("output_dim");
  const std::size_t count = num("param_count");
  if (count != param_count(ck.config))
    throw ParseError("checkpoint: param_count " + std::to_string(count) + " does not match config (" +
                         std::to_string(param_count(ck.config)) + ")",
                     line_no);
  std::vector<unsigned char> raw(count * 8);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(is.gcount()) != raw.size()) throw ParseError("checkpoint: truncated parameter block", 0);
  ck.params.values.resize(count);
  for (std::size_t i = 0; i < count; ++i) ck.params.values[i] = detail::get_le(raw.data() + 8 * i);
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifact("cannot open checkpoint '" + path + "'");
  return read_checkpoint(is);
}

}  // namespace mbo

#endif  // MBO_NET_HPP

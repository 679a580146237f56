#pragma once

#include "latentlm/common.hpp"
#include "latentlm/io.hpp"

#include <functional>
#include <string>
#include <vector>

namespace latentlm {

struct ModelConfig {
  int d = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 0;
  int max_len = 160;  // BOS + 150 generated tokens + EOS headroom
  std::string precision = "f64";

  int head_dim() const { return d / n_heads; }

  void validate() const {
    if (d <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0)
      throw std::invalid_argument("model config: all counts must be positive");
    if (d % n_heads != 0) throw std::invalid_argument("model config: d must be divisible by n_heads");
    if (vocab_size < 4) throw std::invalid_argument("model config: vocab_size must be at least 4");
    if (max_len < 152) throw std::invalid_argument("model config: max_len must be at least 152");
    if (precision != "f32" && precision != "f64")
      throw std::invalid_argument("model config: precision must be f32 or f64");
  }

  json to_json() const {
    return {{"d", d},         {"n_layers", n_layers},     {"n_heads", n_heads},
            {"d_ff", d_ff},   {"vocab_size", vocab_size}, {"max_len", max_len},
            {"precision", precision}};
  }

  static ModelConfig from_json(const json& j) {
    ModelConfig c;
    c.d = j.at("d").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_ff = j.at("d_ff").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.precision = j.value("precision", "f64");
    return c;
  }
};

// Frozen parameters of the micro-transformer. Pre-LN GPT-style blocks,
// learned positional embeddings, untied LM head.
template <class T>
struct Weights {
  struct Block {
    Mat<T> wq, wk, wv, wo;      // d x d, no biases
    Vec<T> ln1_g, ln1_b;        // d
    Vec<T> ln2_g, ln2_b;        // d
    Mat<T> w1;                  // d x d_ff
    Vec<T> b1;                  // d_ff
    Mat<T> w2;                  // d_ff x d
    Vec<T> b2;                  // d
  };

  ModelConfig cfg;
  Mat<T> tok_emb;               // vocab_size x d
  Mat<T> pos_emb;               // max_len x d
  std::vector<Block> blocks;
  Vec<T> lnf_g, lnf_b;          // d
  Mat<T> head;                  // d x vocab_size
};

namespace detail {

template <class T>
void fill_gaussian(Mat<T>& m, Rng& rng, double std) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = static_cast<T>(std * rng.normal());
}

template <class T>
T gelu(T x) {
  const T c = std::sqrt(T(2) / T(M_PI));
  const T u = c * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <class T>
T gelu_grad(T x) {
  const T c = std::sqrt(T(2) / T(M_PI));
  const T x2 = x * x;
  const T u = c * (x + T(0.044715) * x * x2);
  const T t = std::tanh(u);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * T(0.044715) * x2);
}

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
void layer_norm(const Mat<T>& x, const Vec<T>& gain, const Vec<T>& bias, Mat<T>& y,
                Vec<T>& mean, Vec<T>& rstd) {
  const Eigen::Index n = x.rows(), d = x.cols();
  y.resize(n, d);
  mean.resize(n);
  rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const T m = x.row(i).mean();
    const T var = (x.row(i).array() - m).square().sum() / T(d);
    const T r = T(1) / std::sqrt(var + T(kLayerNormEps));
    mean(i) = m;
    rstd(i) = r;
    y.row(i) = (((x.row(i).array() - m) * r) * gain.transpose().array()) + bias.transpose().array();
  }
}

}  // namespace detail

// Deterministic Gaussian init with fan-based scaling; layer norms start
// as the identity transform.
template <class T>
Weights<T> init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  Weights<T> w;
  w.cfg = cfg;
  w.cfg.precision = std::is_same_v<T, float> ? "f32" : "f64";
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(cfg.d));
  w.tok_emb.resize(cfg.vocab_size, cfg.d);
  detail::fill_gaussian(w.tok_emb, rng, emb_std);
  w.pos_emb.resize(cfg.max_len, cfg.d);
  detail::fill_gaussian(w.pos_emb, rng, emb_std);
  w.blocks.resize(cfg.n_layers);
  for (auto& b : w.blocks) {
    const double proj_std = 1.0 / std::sqrt(static_cast<double>(cfg.d));
    b.wq.resize(cfg.d, cfg.d);
    b.wk.resize(cfg.d, cfg.d);
    b.wv.resize(cfg.d, cfg.d);
    b.wo.resize(cfg.d, cfg.d);
    detail::fill_gaussian(b.wq, rng, proj_std);
    detail::fill_gaussian(b.wk, rng, proj_std);
    detail::fill_gaussian(b.wv, rng, proj_std);
    detail::fill_gaussian(b.wo, rng, proj_std);
    b.ln1_g = Vec<T>::Ones(cfg.d);
    b.ln1_b = Vec<T>::Zero(cfg.d);
    b.ln2_g = Vec<T>::Ones(cfg.d);
    b.ln2_b = Vec<T>::Zero(cfg.d);
    b.w1.resize(cfg.d, cfg.d_ff);
    detail::fill_gaussian(b.w1, rng, proj_std);
    b.b1 = Vec<T>::Zero(cfg.d_ff);
    b.w2.resize(cfg.d_ff, cfg.d);
    detail::fill_gaussian(b.w2, rng, 1.0 / std::sqrt(static_cast<double>(cfg.d_ff)));
    b.b2 = Vec<T>::Zero(cfg.d);
  }
  w.lnf_g = Vec<T>::Ones(cfg.d);
  w.lnf_b = Vec<T>::Zero(cfg.d);
  w.head.resize(cfg.d, cfg.vocab_size);
  detail::fill_gaussian(w.head, rng, 1.0 / std::sqrt(static_cast<double>(cfg.d)));
  return w;
}

enum class Site { Embed, Layer, Head };

inline const char* site_name(Site s) {
  switch (s) {
    case Site::Embed: return "embed";
    case Site::Layer: return "layer";
    case Site::Head: return "head";
  }
  return "?";
}

// Contract for additive bias injection. `bias` is invoked once per active
// site and position with the site's input-stream row at pos-1 (zeros at
// pos 0) and must return a finite vector in R^d.
template <class T>
struct BiasPlan {
  std::function<bool(Site site, int layer)> active;  // defaults to all sites
  std::function<Vec<T>(Site site, int layer, int pos, const Vec<T>& h_prev)> bias;

  bool is_active(Site site, int layer) const {
    if (!bias) return false;
    return !active || active(site, layer);
  }
};

// Every intermediate needed for an exact reverse pass.
template <class T>
struct Tape {
  struct BlockTape {
    Mat<T> ln1;
    Vec<T> mu1, r1;
    Mat<T> q, k, v;
    std::vector<Mat<T>> att;  // per-head causal softmax rows
    Mat<T> att_concat;
    Mat<T> mid;               // after attention residual
    Mat<T> ln2;
    Vec<T> mu2, r2;
    Mat<T> ffn_pre;
    Mat<T> ffn_act;
    Mat<T> out;               // block output, pre-injection stream
    Mat<T> x_next;            // post-injection
  };

  std::vector<int> tokens;
  Mat<T> emb;      // token + positional sum, pre-injection stream
  Mat<T> x0;       // post-injection
  std::vector<BlockTape> blocks;
  Mat<T> lnf;      // final layer-norm output, pre-injection stream
  Vec<T> muf, rf;
  Mat<T> head_in;  // post-injection input to the LM head
  Mat<T> logits;

  // Per-position states in network order: embedding output, each block
  // output, head input.
  std::vector<const Mat<T>*> hidden_states() const {
    std::vector<const Mat<T>*> out;
    out.push_back(&x0);
    for (const auto& b : blocks) out.push_back(&b.x_next);
    out.push_back(&head_in);
    return out;
  }
};

// Causal forward pass. Bias vectors from `plan` are added to the embedding
// output, to each block's residual-stream output, and to the final
// layer-norm output right before the LM head.
template <class T>
Mat<T> forward(const Weights<T>& w, const TokenSeq& tokens, const BiasPlan<T>* plan = nullptr,
               Tape<T>* tape_out = nullptr) {
  const ModelConfig& cfg = w.cfg;
  const int S = static_cast<int>(tokens.size());
  if (S == 0) throw std::invalid_argument("forward: empty token sequence");
  if (S > cfg.max_len)
    throw std::invalid_argument("forward: sequence length " + std::to_string(S) +
                                " exceeds max_len " + std::to_string(cfg.max_len));
  for (int t : tokens)
    if (t < 0 || t >= cfg.vocab_size) throw std::invalid_argument("forward: token id out of range");

  Tape<T> local;
  Tape<T>& tp = tape_out ? *tape_out : local;
  tp = Tape<T>{};
  tp.tokens = tokens;

  const int d = cfg.d, H = cfg.n_heads, dh = cfg.head_dim();
  const Vec<T> zero = Vec<T>::Zero(d);

  auto inject = [&](Site site, int layer, const Mat<T>& stream) -> Mat<T> {
    if (!plan || !plan->is_active(site, layer)) return stream;
    Mat<T> out = stream;
    for (int t = 0; t < S; ++t) {
      const Vec<T> hp = t == 0 ? zero : Vec<T>(stream.row(t - 1).transpose());
      out.row(t) += plan->bias(site, layer, t, hp).transpose();
    }
    return out;
  };

  tp.emb.resize(S, d);
  for (int t = 0; t < S; ++t)
    tp.emb.row(t) = w.tok_emb.row(tokens[t]) + w.pos_emb.row(t);
  tp.x0 = inject(Site::Embed, -1, tp.emb);

  tp.blocks.resize(cfg.n_layers);
  const Mat<T>* x = &tp.x0;
  const T scale = T(1) / std::sqrt(T(dh));
  for (int l = 0; l < cfg.n_layers; ++l) {
    auto& bt = tp.blocks[l];
    const auto& blk = w.blocks[l];
    detail::layer_norm(*x, blk.ln1_g, blk.ln1_b, bt.ln1, bt.mu1, bt.r1);
    bt.q = bt.ln1 * blk.wq;
    bt.k = bt.ln1 * blk.wk;
    bt.v = bt.ln1 * blk.wv;
    bt.att.resize(H);
    bt.att_concat.resize(S, d);
    for (int h = 0; h < H; ++h) {
      const auto Qh = bt.q.middleCols(h * dh, dh);
      const auto Kh = bt.k.middleCols(h * dh, dh);
      const auto Vh = bt.v.middleCols(h * dh, dh);
      Mat<T> scores = (Qh * Kh.transpose()) * scale;
      Mat<T>& P = bt.att[h];
      P = Mat<T>::Zero(S, S);
      for (int i = 0; i < S; ++i) {
        T mx = scores(i, 0);
        for (int j = 1; j <= i; ++j) mx = std::max(mx, scores(i, j));
        T sum = T(0);
        for (int j = 0; j <= i; ++j) {
          P(i, j) = std::exp(scores(i, j) - mx);
          sum += P(i, j);
        }
        for (int j = 0; j <= i; ++j) P(i, j) /= sum;
      }
      bt.att_concat.middleCols(h * dh, dh) = P * Vh;
    }
    bt.mid = *x + bt.att_concat * blk.wo;
    detail::layer_norm(bt.mid, blk.ln2_g, blk.ln2_b, bt.ln2, bt.mu2, bt.r2);
    bt.ffn_pre = bt.ln2 * blk.w1;
    bt.ffn_pre.rowwise() += blk.b1.transpose();
    bt.ffn_act = bt.ffn_pre.unaryExpr([](T v) { return detail::gelu(v); });
    Mat<T> f2 = bt.ffn_act * blk.w2;
    f2.rowwise() += blk.b2.transpose();
    bt.out = bt.mid + f2;
    bt.x_next = inject(Site::Layer, l, bt.out);
    x = &bt.x_next;
  }

  detail::layer_norm(*x, w.lnf_g, w.lnf_b, tp.lnf, tp.muf, tp.rf);
  tp.head_in = inject(Site::Head, -1, tp.lnf);
  tp.logits = tp.head_in * w.head;
  return tp.logits;
}

// Mean over positions of -log softmax(logits_t)[target_t].
template <class T>
T cross_entropy(const Mat<T>& logits, const TokenSeq& targets) {
  const Eigen::Index n = logits.rows();
  if (static_cast<Eigen::Index>(targets.size()) != n)
    throw std::invalid_argument("cross_entropy: targets must match logits rows");
  T total = T(0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = targets[static_cast<std::size_t>(i)];
    if (y < 0 || y >= logits.cols()) throw std::invalid_argument("cross_entropy: target id out of range");
    const T mx = logits.row(i).maxCoeff();
    const T lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    total += lse - logits(i, y);
  }
  return total / T(n);
}

// d(mean cross entropy)/d(logits): (softmax - onehot) / n.
template <class T>
Mat<T> cross_entropy_grad(const Mat<T>& logits, const TokenSeq& targets) {
  const Eigen::Index n = logits.rows();
  if (static_cast<Eigen::Index>(targets.size()) != n)
    throw std::invalid_argument("cross_entropy_grad: targets must match logits rows");
  Mat<T> g(n, logits.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    const T mx = logits.row(i).maxCoeff();
    Eigen::Array<T, 1, Eigen::Dynamic> e = (logits.row(i).array() - mx).exp();
    g.row(i) = (e / e.sum()).matrix();
    g(i, targets[static_cast<std::size_t>(i)]) -= T(1);
  }
  g /= T(n);
  return g;
}

// --------------------------------------------------------------------------
// Persistence: JSON header + little-endian blob, see io.hpp.
// --------------------------------------------------------------------------

namespace detail {

template <class T>
void collect_tensors(const Weights<T>& w, std::vector<TensorEntry>& out) {
  auto add_mat = [&](const std::string& name, const Mat<T>& m) {
    TensorEntry t;
    t.name = name;
    t.shape = {m.rows(), m.cols()};
    t.data.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) t.data.push_back(static_cast<double>(m(r, c)));
    out.push_back(std::move(t));
  };
  auto add_vec = [&](const std::string& name, const Vec<T>& v) {
    TensorEntry t;
    t.name = name;
    t.shape = {v.size()};
    for (Eigen::Index i = 0; i < v.size(); ++i) t.data.push_back(static_cast<double>(v(i)));
    out.push_back(std::move(t));
  };
  add_mat("tok_emb", w.tok_emb);
  add_mat("pos_emb", w.pos_emb);
  for (std::size_t l = 0; l < w.blocks.size(); ++l) {
    const auto& b = w.blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    add_mat(p + "wq", b.wq);
    add_mat(p + "wk", b.wk);
    add_mat(p + "wv", b.wv);
    add_mat(p + "wo", b.wo);
    add_vec(p + "ln1_g", b.ln1_g);
    add_vec(p + "ln1_b", b.ln1_b);
    add_vec(p + "ln2_g", b.ln2_g);
    add_vec(p + "ln2_b", b.ln2_b);
    add_mat(p + "w1", b.w1);
    add_vec(p + "b1", b.b1);
    add_mat(p + "w2", b.w2);
    add_vec(p + "b2", b.b2);
  }
  add_vec("lnf_g", w.lnf_g);
  add_vec("lnf_b", w.lnf_b);
  add_mat("head", w.head);
}

template <class T>
Mat<T> mat_from_entry(const TensorEntry& e, Eigen::Index rows, Eigen::Index cols) {
  if (e.shape.size() != 2 || e.shape[0] != rows || e.shape[1] != cols)
    throw std::runtime_error("weights: tensor " + e.name + " has unexpected shape");
  Mat<T> m(rows, cols);
  std::size_t i = 0;
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = static_cast<T>(e.data[i++]);
  return m;
}

template <class T>
Vec<T> vec_from_entry(const TensorEntry& e, Eigen::Index n) {
  if (e.shape.size() != 1 || e.shape[0] != n)
    throw std::runtime_error("weights: tensor " + e.name + " has unexpected shape");
  Vec<T> v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = static_cast<T>(e.data[static_cast<std::size_t>(i)]);
  return v;
}

}  // namespace detail

template <class T>
void save_weights(const Weights<T>& w, const fs::path& path) {
  TensorFile tf;
  tf.precision = std::is_same_v<T, float> ? "f32" : "f64";
  json cfg = w.cfg.to_json();
  cfg["precision"] = tf.precision;
  tf.config = {{"kind", "model-weights"}, {"model", cfg}};
  detail::collect_tensors(w, tf.tensors);
  save_tensors(path, tf);
}

template <class T>
Weights<T> load_weights(const fs::path& path) {
  const TensorFile tf = load_tensors(path);
  if (tf.config.value("kind", "") != "model-weights")
    throw std::runtime_error("weights: not a model weight file: " + path.string());
  Weights<T> w;
  w.cfg = ModelConfig::from_json(tf.config.at("model"));
  w.cfg.precision = std::is_same_v<T, float> ? "f32" : "f64";
  w.cfg.validate();
  std::size_t i = 0;
  auto next = [&]() -> const TensorEntry& {
    if (i >= tf.tensors.size()) throw std::runtime_error("weights: manifest too short");
    return tf.tensors[i++];
  };
  const int d = w.cfg.d;
  w.tok_emb = detail::mat_from_entry<T>(next(), w.cfg.vocab_size, d);
  w.pos_emb = detail::mat_from_entry<T>(next(), w.cfg.max_len, d);
  w.blocks.resize(w.cfg.n_layers);
  for (auto& b : w.blocks) {
    b.wq = detail::mat_from_entry<T>(next(), d, d);
    b.wk = detail::mat_from_entry<T>(next(), d, d);
    b.wv = detail::mat_from_entry<T>(next(), d, d);
    b.wo = detail::mat_from_entry<T>(next(), d, d);
    b.ln1_g = detail::vec_from_entry<T>(next(), d);
    b.ln1_b = detail::vec_from_entry<T>(next(), d);
    b.ln2_g = detail::vec_from_entry<T>(next(), d);
    b.ln2_b = detail::vec_from_entry<T>(next(), d);
    b.w1 = detail::mat_from_entry<T>(next(), d, w.cfg.d_ff);
    b.b1 = detail::vec_from_entry<T>(next(), w.cfg.d_ff);
    b.w2 = detail::mat_from_entry<T>(next(), w.cfg.d_ff, d);
    b.b2 = detail::vec_from_entry<T>(next(), d);
  }
  w.lnf_g = detail::vec_from_entry<T>(next(), d);
  w.lnf_b = detail::vec_from_entry<T>(next(), d);
  w.head = detail::mat_from_entry<T>(next(), d, w.cfg.vocab_size);
  if (i != tf.tensors.size()) throw std::runtime_error("weights: unexpected extra tensors");
  return w;
}

// Content fingerprint over config and raw parameter bytes; used by the
// frozen-weights checks and determinism tests.
template <class T>
std::uint64_t weights_fingerprint(const Weights<T>& w) {
  std::vector<TensorEntry> tensors;
  detail::collect_tensors(w, tensors);
  std::uint64_t h = fnv1a64(w.cfg.to_json().dump());
  for (const auto& t : tensors)
    h = fnv1a64(t.data.data(), t.data.size() * sizeof(double), h);
  return h;
}

}  // namespace latentlm

#include "wilke/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

namespace wilke {

void ModelConfig::validate() const {
  auto need = [](bool ok, const char* field, const char* what) {
    if (!ok) throw ValidationError(std::string("config.") + field + ": " + what);
  };
  need(n_layers >= 1, "n_layers", "must be >= 1");
  need(d_model >= 1, "d_model", "must be >= 1");
  need(d_mlp >= 1, "d_mlp", "must be >= 1");
  need(n_heads >= 1, "n_heads", "must be >= 1");
  need(vocab_size >= 1, "vocab_size", "must be >= 1");
  need(max_seq >= 1, "max_seq", "must be >= 1");
  need(ln_eps > 0, "ln_eps", "must be > 0");
  need(d_model % n_heads == 0, "n_heads", "must divide d_model");
}

const char* to_string(SiteKind kind) {
  switch (kind) {
    case SiteKind::embedding: return "embedding";
    case SiteKind::hidden_state: return "hidden_state";
    case SiteKind::mlp_out: return "mlp_out";
    case SiteKind::attn_out: return "attn_out";
  }
  return "?";
}

SiteKind site_kind_from_string(const std::string& text) {
  if (text == "embedding") return SiteKind::embedding;
  if (text == "hidden_state" || text == "hidden") return SiteKind::hidden_state;
  if (text == "mlp_out" || text == "mlp") return SiteKind::mlp_out;
  if (text == "attn_out" || text == "attn") return SiteKind::attn_out;
  throw ValidationError("unknown site kind '" + text + "'");
}

// ---------------------------------------------------------------------------
// Model construction

template <typename Scalar>
Model<Scalar> Model<Scalar>::zeros(const ModelConfig& config) {
  config.validate();
  const int d = config.d_model, m = config.d_mlp;
  Model model;
  model.config = config;
  model.tok_emb = Matrix<Scalar>::Zero(config.vocab_size, d);
  model.pos_emb = Matrix<Scalar>::Zero(config.max_seq, d);
  model.unembed = Matrix<Scalar>::Zero(config.vocab_size, d);
  model.blocks.resize(config.n_layers);
  for (auto& b : model.blocks) {
    b.ln1_w = Vector<Scalar>::Ones(d);
    b.ln1_b = Vector<Scalar>::Zero(d);
    for (auto* w : {&b.q_w, &b.k_w, &b.v_w, &b.o_w}) *w = Matrix<Scalar>::Zero(d, d);
    for (auto* v : {&b.q_b, &b.k_b, &b.v_b, &b.o_b}) *v = Vector<Scalar>::Zero(d);
    b.ln2_w = Vector<Scalar>::Ones(d);
    b.ln2_b = Vector<Scalar>::Zero(d);
    b.fc_w = Matrix<Scalar>::Zero(d, m);
    b.fc_b = Vector<Scalar>::Zero(m);
    b.proj_w = Matrix<Scalar>::Zero(m, d);
    b.proj_b = Vector<Scalar>::Zero(d);
  }
  model.lnf_w = Vector<Scalar>::Ones(d);
  model.lnf_b = Vector<Scalar>::Zero(d);
  return model;
}

template <typename Scalar>
Model<Scalar> Model<Scalar>::random(const ModelConfig& config, std::uint64_t seed, double init_std) {
  Model model = zeros(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double base = init_std;
  const double resid = base / std::sqrt(2.0 * config.n_layers);
  auto fill = [&](auto& mat, double stddev) {
    for (Eigen::Index i = 0; i < mat.size(); ++i) mat.data()[i] = static_cast<Scalar>(stddev * normal(rng));
  };
  fill(model.tok_emb, base);
  fill(model.pos_emb, base / 2);
  for (auto& b : model.blocks) {
    fill(b.q_w, base);
    fill(b.k_w, base);
    fill(b.v_w, base);
    fill(b.o_w, resid);
    fill(b.fc_w, base);
    fill(b.proj_w, resid);
  }
  model.unembed = model.tok_emb;
  return model;
}

template <typename Scalar>
template <typename Other>
Model<Other> Model<Scalar>::cast() const {
  Model<Other> out;
  out.config = config;
  out.tok_emb = tok_emb.template cast<Other>();
  out.pos_emb = pos_emb.template cast<Other>();
  out.unembed = unembed.template cast<Other>();
  out.lnf_w = lnf_w.template cast<Other>();
  out.lnf_b = lnf_b.template cast<Other>();
  out.blocks.resize(blocks.size());
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const auto& a = blocks[l];
    auto& b = out.blocks[l];
    b.ln1_w = a.ln1_w.template cast<Other>();
    b.ln1_b = a.ln1_b.template cast<Other>();
    b.q_w = a.q_w.template cast<Other>();
    b.k_w = a.k_w.template cast<Other>();
    b.v_w = a.v_w.template cast<Other>();
    b.o_w = a.o_w.template cast<Other>();
    b.q_b = a.q_b.template cast<Other>();
    b.k_b = a.k_b.template cast<Other>();
    b.v_b = a.v_b.template cast<Other>();
    b.o_b = a.o_b.template cast<Other>();
    b.ln2_w = a.ln2_w.template cast<Other>();
    b.ln2_b = a.ln2_b.template cast<Other>();
    b.fc_w = a.fc_w.template cast<Other>();
    b.fc_b = a.fc_b.template cast<Other>();
    b.proj_w = a.proj_w.template cast<Other>();
    b.proj_b = a.proj_b.template cast<Other>();
  }
  return out;
}

namespace {

template <typename ModelT, typename Fn>
void visit_tensors(ModelT& model, const Fn& fn) {
  auto mat = [&](const std::string& name, auto& m) {
    fn(name, std::vector<std::int64_t>{m.rows(), m.cols()}, m.data());
  };
  auto vec = [&](const std::string& name, auto& v) { fn(name, std::vector<std::int64_t>{v.size()}, v.data()); };
  mat("tok_emb", model.tok_emb);
  mat("pos_emb", model.pos_emb);
  mat("unembed", model.unembed);
  for (std::size_t l = 0; l < model.blocks.size(); ++l) {
    auto& b = model.blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    vec(p + "ln1.w", b.ln1_w);
    vec(p + "ln1.b", b.ln1_b);
    mat(p + "attn.q.w", b.q_w);
    vec(p + "attn.q.b", b.q_b);
    mat(p + "attn.k.w", b.k_w);
    vec(p + "attn.k.b", b.k_b);
    mat(p + "attn.v.w", b.v_w);
    vec(p + "attn.v.b", b.v_b);
    mat(p + "attn.o.w", b.o_w);
    vec(p + "attn.o.b", b.o_b);
    vec(p + "ln2.w", b.ln2_w);
    vec(p + "ln2.b", b.ln2_b);
    mat(p + "mlp.fc.w", b.fc_w);
    vec(p + "mlp.fc.b", b.fc_b);
    mat(p + "mlp.proj.w", b.proj_w);
    vec(p + "mlp.proj.b", b.proj_b);
  }
  vec("ln_f.w", model.lnf_w);
  vec("ln_f.b", model.lnf_b);
}

}  // namespace

template <typename Scalar>
void Model<Scalar>::for_each_tensor(const TensorVisitor& fn) {
  visit_tensors(*this, fn);
}

template <typename Scalar>
void Model<Scalar>::for_each_tensor(const ConstTensorVisitor& fn) const {
  visit_tensors(*this, fn);
}

template <typename Scalar>
void Model<Scalar>::check_shapes() const {
  const Model ref = zeros(config);
  std::vector<std::pair<std::string, std::vector<std::int64_t>>> expected;
  ref.for_each_tensor(ConstTensorVisitor(
      [&](const std::string& name, const std::vector<std::int64_t>& shape, const Scalar*) {
        expected.emplace_back(name, shape);
      }));
  if (blocks.size() != ref.blocks.size())
    throw ValidationError("blocks: expected " + std::to_string(ref.blocks.size()) + " layers, got " +
                          std::to_string(blocks.size()));
  std::size_t i = 0;
  for_each_tensor(ConstTensorVisitor(
      [&](const std::string& name, const std::vector<std::int64_t>& shape, const Scalar*) {
        if (expected[i].second != shape) throw ValidationError(name + ": shape mismatch vs config");
        ++i;
      }));
}

template <typename Scalar>
bool Model<Scalar>::all_finite() const {
  bool ok = true;
  for_each_tensor(ConstTensorVisitor(
      [&](const std::string&, const std::vector<std::int64_t>& shape, const Scalar* data) {
        std::int64_t n = 1;
        for (auto s : shape) n *= s;
        for (std::int64_t k = 0; k < n && ok; ++k) ok = std::isfinite(static_cast<double>(data[k]));
      }));
  return ok;
}

// ---------------------------------------------------------------------------
// Elementwise helpers

template <typename Scalar>
Scalar gelu(Scalar x) {
  const Scalar c = static_cast<Scalar>(0.7978845608028654);  // sqrt(2/pi)
  const Scalar inner = c * (x + static_cast<Scalar>(0.044715) * x * x * x);
  return static_cast<Scalar>(0.5) * x * (static_cast<Scalar>(1) + std::tanh(inner));
}

namespace {

template <typename Scalar>
Scalar gelu_grad(Scalar x) {
  const Scalar c = static_cast<Scalar>(0.7978845608028654);
  const Scalar a = static_cast<Scalar>(0.044715);
  const Scalar inner = c * (x + a * x * x * x);
  const Scalar t = std::tanh(inner);
  const Scalar dinner = c * (static_cast<Scalar>(1) + static_cast<Scalar>(3) * a * x * x);
  return static_cast<Scalar>(0.5) * (static_cast<Scalar>(1) + t) +
         static_cast<Scalar>(0.5) * x * (static_cast<Scalar>(1) - t * t) * dinner;
}

/// Elementwise gelu over a matrix using Eigen's vectorized tanh.
template <typename Scalar>
Matrix<Scalar> gelu_matrix(const Matrix<Scalar>& x) {
  const Scalar c = static_cast<Scalar>(0.7978845608028654);
  const auto a = x.array();
  const auto t = (c * (a + static_cast<Scalar>(0.044715) * a.cube())).tanh();
  return (static_cast<Scalar>(0.5) * a * (static_cast<Scalar>(1) + t)).matrix();
}

template <typename Scalar>
Matrix<Scalar> gelu_grad_matrix(const Matrix<Scalar>& x) {
  const Scalar c = static_cast<Scalar>(0.7978845608028654);
  const Scalar k = static_cast<Scalar>(0.044715);
  const auto a = x.array();
  const auto t = (c * (a + k * a.cube())).tanh().eval();
  const auto dinner = c * (static_cast<Scalar>(1) + static_cast<Scalar>(3) * k * a.square());
  return (static_cast<Scalar>(0.5) * (static_cast<Scalar>(1) + t) +
          static_cast<Scalar>(0.5) * a * (static_cast<Scalar>(1) - t.square()) * dinner)
      .matrix();
}

/// Row-wise layernorm; keeps normalized rows and reciprocal std for backward.
template <typename Scalar>
void layernorm(const Matrix<Scalar>& x, const Vector<Scalar>& w, const Vector<Scalar>& b, double eps,
               Matrix<Scalar>& hat, Matrix<Scalar>& out, Vector<Scalar>& rstd) {
  const Eigen::Index n = x.rows(), d = x.cols();
  hat.resize(n, d);
  out.resize(n, d);
  rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Scalar mean = x.row(i).mean();
    const Scalar var = (x.row(i).array() - mean).square().mean();
    const Scalar r = static_cast<Scalar>(1) / std::sqrt(var + static_cast<Scalar>(eps));
    rstd(i) = r;
    hat.row(i) = (x.row(i).array() - mean) * r;
    out.row(i) = hat.row(i).array() * w.transpose().array() + b.transpose().array();
  }
}

template <typename Scalar>
Matrix<Scalar> layernorm_backward(const Matrix<Scalar>& dout, const Matrix<Scalar>& hat,
                                  const Vector<Scalar>& rstd, const Vector<Scalar>& w, Vector<Scalar>* dw,
                                  Vector<Scalar>* db) {
  const Eigen::Index n = dout.rows(), d = dout.cols();
  Matrix<Scalar> dx(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Array<Scalar, 1, Eigen::Dynamic> dhat = dout.row(i).array() * w.transpose().array();
    const Scalar mean_dhat = dhat.mean();
    const Scalar mean_dhat_hat = (dhat * hat.row(i).array()).mean();
    dx.row(i) = rstd(i) * (dhat - mean_dhat - hat.row(i).array() * mean_dhat_hat);
  }
  if (dw) *dw += (dout.array() * hat.array()).colwise().sum().transpose().matrix();
  if (db) *db += dout.colwise().sum().transpose();
  return dx;
}

template <typename Scalar>
void add_bias(Matrix<Scalar>& m, const Vector<Scalar>& b) {
  m.rowwise() += b.transpose();
}

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

template <typename Scalar>
void check_tokens(const Model<Scalar>& model, const Tokens& tokens) {
  if (tokens.empty()) throw ValidationError("tokens: empty sequence");
  if (static_cast<int>(tokens.size()) > model.config.max_seq)
    throw ValidationError("tokens: length " + std::to_string(tokens.size()) + " exceeds max_seq " +
                          std::to_string(model.config.max_seq));
  for (Token t : tokens)
    if (t < 0 || t >= model.config.vocab_size)
      throw ValidationError("tokens: id " + std::to_string(t) + " outside vocabulary");
}

template <typename Scalar>
void check_site(const ModelConfig& cfg, const Site& s, std::size_t seq) {
  if (s.layer < 0 || s.layer >= cfg.n_layers)
    throw ValidationError("site.layer " + std::to_string(s.layer) + " out of range");
  if (s.token < 0 || static_cast<std::size_t>(s.token) >= seq)
    throw ValidationError("site.token " + std::to_string(s.token) + " out of range");
  if (s.kind == SiteKind::embedding && s.layer != 0)
    throw ValidationError("site: embedding sites live at layer 0");
}

/// Applies all interventions registered for (layer, kind) to `states`.
template <typename Scalar>
void apply_interventions(const std::vector<Intervention<Scalar>>& ivs, int layer, SiteKind kind,
                         Matrix<Scalar>& states) {
  for (const auto& iv : ivs) {
    if (iv.site.layer != layer || iv.site.kind != kind) continue;
    auto row = states.row(iv.site.token);
    switch (iv.action) {
      case ActionKind::inject_add: row += iv.value.transpose(); break;
      case ActionKind::replace: row = iv.value.transpose(); break;
      case ActionKind::corrupt_gaussian:
        row += iv.scale * corruption_noise<Scalar>(iv.seed, iv.site.token, static_cast<int>(states.cols())).transpose();
        break;
    }
  }
}

template <typename Scalar>
void validate_interventions(const ModelConfig& cfg, const std::vector<Intervention<Scalar>>& ivs, std::size_t seq) {
  std::set<Site> seen;
  for (const auto& iv : ivs) {
    check_site<Scalar>(cfg, iv.site, seq);
    if (!seen.insert(iv.site).second)
      throw ValidationError(std::string("interventions: conflicting interventions at (") +
                            std::to_string(iv.site.layer) + ", " + std::to_string(iv.site.token) + ", " +
                            to_string(iv.site.kind) + ")");
    if (iv.action == ActionKind::corrupt_gaussian) {
      if (!(iv.scale >= 0)) throw ValidationError("intervention.scale must be >= 0");
    } else if (iv.value.size() != cfg.d_model) {
      throw ValidationError("intervention.value: length must equal d_model");
    }
  }
}

template <typename Scalar>
const Matrix<Scalar>& site_states(const ForwardCache<Scalar>& c, const Site& s) {
  switch (s.kind) {
    case SiteKind::embedding: return c.h0;
    case SiteKind::hidden_state: return c.blocks[s.layer].h_out;
    case SiteKind::mlp_out: return c.blocks[s.layer].mlp_out;
    case SiteKind::attn_out: return c.blocks[s.layer].attn_out;
  }
  return c.h0;
}

}  // namespace

template <typename Scalar>
Vector<Scalar> corruption_noise(std::uint64_t seed, int token, int dim) {
  std::mt19937_64 rng(mix64(seed ^ mix64(static_cast<std::uint64_t>(token) + 0x51ED27ull)));
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector<Scalar> v(dim);
  for (int i = 0; i < dim; ++i) v(i) = static_cast<Scalar>(normal(rng));
  return v;
}

// ---------------------------------------------------------------------------
// Forward

template <typename Scalar>
ForwardCache<Scalar> forward_cached(const Model<Scalar>& model, const Tokens& tokens,
                                    const std::vector<Intervention<Scalar>>& interventions) {
  const auto& cfg = model.config;
  check_tokens(model, tokens);
  validate_interventions(cfg, interventions, tokens.size());
  const Eigen::Index n = static_cast<Eigen::Index>(tokens.size());
  const int d = cfg.d_model, heads = cfg.n_heads, dh = cfg.head_dim();
  const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(dh)));

  ForwardCache<Scalar> c;
  c.tokens = tokens;
  c.interventions = interventions;
  c.h0.resize(n, d);
  for (Eigen::Index i = 0; i < n; ++i) c.h0.row(i) = model.tok_emb.row(tokens[i]) + model.pos_emb.row(i);
  apply_interventions(interventions, 0, SiteKind::embedding, c.h0);

  c.blocks.resize(cfg.n_layers);
  const Matrix<Scalar>* h = &c.h0;
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& w = model.blocks[l];
    auto& b = c.blocks[l];
    b.h_in = *h;
    layernorm(b.h_in, w.ln1_w, w.ln1_b, cfg.ln_eps, b.ln1_hat, b.ln1_out, b.ln1_rstd);
    b.q.noalias() = b.ln1_out * w.q_w;
    b.k.noalias() = b.ln1_out * w.k_w;
    b.v.noalias() = b.ln1_out * w.v_w;
    add_bias(b.q, w.q_b);
    add_bias(b.k, w.k_b);
    add_bias(b.v, w.v_b);
    b.attn_concat.resize(n, d);
    b.probs.resize(heads);
    for (int hd = 0; hd < heads; ++hd) {
      const auto qh = b.q.middleCols(hd * dh, dh);
      const auto kh = b.k.middleCols(hd * dh, dh);
      const auto vh = b.v.middleCols(hd * dh, dh);
      Matrix<Scalar> s = (qh * kh.transpose()) * scale;
      auto& p = b.probs[hd];
      p = Matrix<Scalar>::Zero(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const Scalar mx = s.row(i).head(i + 1).maxCoeff();
        Scalar sum = 0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          const Scalar e = std::exp(s(i, j) - mx);
          p(i, j) = e;
          sum += e;
        }
        p.row(i).head(i + 1) /= sum;
      }
      b.attn_concat.middleCols(hd * dh, dh).noalias() = p * vh;
    }
    b.attn_out.noalias() = b.attn_concat * w.o_w;
    add_bias(b.attn_out, w.o_b);
    apply_interventions(interventions, l, SiteKind::attn_out, b.attn_out);
    b.h_mid = b.h_in + b.attn_out;

    layernorm(b.h_mid, w.ln2_w, w.ln2_b, cfg.ln_eps, b.ln2_hat, b.ln2_out, b.ln2_rstd);
    b.pre.noalias() = b.ln2_out * w.fc_w;
    add_bias(b.pre, w.fc_b);
    b.act = gelu_matrix(b.pre);
    b.mlp_out.noalias() = b.act * w.proj_w;
    add_bias(b.mlp_out, w.proj_b);
    apply_interventions(interventions, l, SiteKind::mlp_out, b.mlp_out);
    b.h_out = b.h_mid + b.mlp_out;
    apply_interventions(interventions, l, SiteKind::hidden_state, b.h_out);
    h = &b.h_out;
  }
  layernorm(*h, model.lnf_w, model.lnf_b, cfg.ln_eps, c.lnf_hat, c.lnf_out, c.lnf_rstd);
  c.logits.noalias() = c.lnf_out * model.unembed.transpose();
  return c;
}

template <typename Scalar>
Matrix<Scalar> forward(const Model<Scalar>& model, const Tokens& tokens) {
  return forward_cached(model, tokens).logits;
}

template <typename Scalar>
ForwardResult<Scalar> forward_with(const Model<Scalar>& model, const Tokens& tokens,
                                   const std::vector<Intervention<Scalar>>& interventions,
                                   const std::vector<Site>& capture) {
  for (const auto& s : capture) check_site<Scalar>(model.config, s, tokens.size());
  auto cache = forward_cached(model, tokens, interventions);
  ForwardResult<Scalar> out;
  for (const auto& s : capture) out.captured[s] = site_states(cache, s).row(s.token).transpose();
  out.logits = std::move(cache.logits);
  return out;
}

// ---------------------------------------------------------------------------
// Backward

template <typename Scalar>
Gradients<Scalar> backward(const Model<Scalar>& model, const ForwardCache<Scalar>& c,
                           const Matrix<Scalar>& dlogits, const std::vector<Site>& sites,
                           bool param_grads) {
  const auto& cfg = model.config;
  const Eigen::Index n = static_cast<Eigen::Index>(c.tokens.size());
  const int heads = cfg.n_heads, hdim = cfg.head_dim();
  const Scalar scale = static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(hdim)));
  for (const auto& s : sites) check_site<Scalar>(cfg, s, c.tokens.size());

  Gradients<Scalar> g;
  Model<Scalar>* pg = nullptr;
  if (param_grads) {
    g.params = Model<Scalar>::zeros(cfg);
    pg = &*g.params;
    pg->lnf_w.setZero();
    for (auto& b : pg->blocks) {
      b.ln1_w.setZero();
      b.ln2_w.setZero();
    }
  }

  // Records gradients for requested sites and cuts flow through replaced rows.
  auto visit = [&](int layer, SiteKind kind, Matrix<Scalar>& grad) {
    for (const auto& s : sites)
      if (s.layer == layer && s.kind == kind) g.at_sites[s] = grad.row(s.token).transpose();
    for (const auto& iv : c.interventions)
      if (iv.site.layer == layer && iv.site.kind == kind && iv.action == ActionKind::replace)
        grad.row(iv.site.token).setZero();
  };

  Matrix<Scalar> dlnf = dlogits * model.unembed;
  if (pg) pg->unembed.noalias() += dlogits.transpose() * c.lnf_out;
  Matrix<Scalar> dh = layernorm_backward(dlnf, c.lnf_hat, c.lnf_rstd, model.lnf_w, pg ? &pg->lnf_w : nullptr,
                                         pg ? &pg->lnf_b : nullptr);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& w = model.blocks[l];
    const auto& b = c.blocks[l];
    BlockWeights<Scalar>* gw = pg ? &pg->blocks[l] : nullptr;

    visit(l, SiteKind::hidden_state, dh);
    Matrix<Scalar> dm = dh;
    visit(l, SiteKind::mlp_out, dm);
    Matrix<Scalar> dmid = dh;

    if (gw) {
      gw->proj_w.noalias() += b.act.transpose() * dm;
      gw->proj_b += dm.colwise().sum().transpose();
    }
    Matrix<Scalar> dpre = dm * w.proj_w.transpose();
    dpre.array() *= gelu_grad_matrix(b.pre).array();
    if (gw) {
      gw->fc_w.noalias() += b.ln2_out.transpose() * dpre;
      gw->fc_b += dpre.colwise().sum().transpose();
    }
    Matrix<Scalar> dln2 = dpre * w.fc_w.transpose();
    dmid += layernorm_backward(dln2, b.ln2_hat, b.ln2_rstd, w.ln2_w, gw ? &gw->ln2_w : nullptr,
                               gw ? &gw->ln2_b : nullptr);

    Matrix<Scalar> dattn = dmid;
    visit(l, SiteKind::attn_out, dattn);
    Matrix<Scalar> din = dmid;

    if (gw) {
      gw->o_w.noalias() += b.attn_concat.transpose() * dattn;
      gw->o_b += dattn.colwise().sum().transpose();
    }
    Matrix<Scalar> dconcat = dattn * w.o_w.transpose();
    Matrix<Scalar> dq(n, cfg.d_model), dk(n, cfg.d_model), dv(n, cfg.d_model);
    for (int hd = 0; hd < heads; ++hd) {
      const auto qh = b.q.middleCols(hd * hdim, hdim);
      const auto kh = b.k.middleCols(hd * hdim, hdim);
      const auto vh = b.v.middleCols(hd * hdim, hdim);
      const auto& p = b.probs[hd];
      const auto dout = dconcat.middleCols(hd * hdim, hdim);
      Matrix<Scalar> dp = dout * vh.transpose();
      dv.middleCols(hd * hdim, hdim).noalias() = p.transpose() * dout;
      Matrix<Scalar> ds = Matrix<Scalar>::Zero(n, n);
      for (Eigen::Index i = 0; i < n; ++i) {
        const Scalar dot = (dp.row(i).head(i + 1).array() * p.row(i).head(i + 1).array()).sum();
        ds.row(i).head(i + 1) = p.row(i).head(i + 1).array() * (dp.row(i).head(i + 1).array() - dot);
      }
      ds *= scale;
      dq.middleCols(hd * hdim, hdim).noalias() = ds * kh;
      dk.middleCols(hd * hdim, hdim).noalias() = ds.transpose() * qh;
    }
    if (gw) {
      gw->q_w.noalias() += b.ln1_out.transpose() * dq;
      gw->k_w.noalias() += b.ln1_out.transpose() * dk;
      gw->v_w.noalias() += b.ln1_out.transpose() * dv;
      gw->q_b += dq.colwise().sum().transpose();
      gw->k_b += dk.colwise().sum().transpose();
      gw->v_b += dv.colwise().sum().transpose();
    }
    Matrix<Scalar> dln1 = dq * w.q_w.transpose();
    dln1.noalias() += dk * w.k_w.transpose();
    dln1.noalias() += dv * w.v_w.transpose();
    din += layernorm_backward(dln1, b.ln1_hat, b.ln1_rstd, w.ln1_w, gw ? &gw->ln1_w : nullptr,
                              gw ? &gw->ln1_b : nullptr);
    dh = std::move(din);
  }

  visit(0, SiteKind::embedding, dh);
  if (pg) {
    for (Eigen::Index i = 0; i < n; ++i) {
      pg->tok_emb.row(c.tokens[i]) += dh.row(i);
      pg->pos_emb.row(i) += dh.row(i);
    }
  }
  for (const auto& [site, grad] : g.at_sites)
    if (!grad.allFinite()) throw NumericError("backward: non-finite gradient at site");
  return g;
}

template <typename Scalar>
Vector<Scalar> grad_at_site(const Model<Scalar>& model, const Tokens& tokens, const Site& site,
                            const LogitLoss<Scalar>& loss) {
  if (site.kind != SiteKind::mlp_out && site.kind != SiteKind::hidden_state)
    throw ValidationError("grad_at_site: site kind must be mlp_out or hidden_state");
  check_site<Scalar>(model.config, site, tokens.size());
  const auto cache = forward_cached(model, tokens);
  if (!cache.logits.allFinite()) throw NumericError("grad_at_site: non-finite logits");
  Matrix<Scalar> dlogits = Matrix<Scalar>::Zero(cache.logits.rows(), cache.logits.cols());
  const Scalar value = loss(cache.logits, dlogits);
  if (!std::isfinite(static_cast<double>(value))) throw NumericError("grad_at_site: non-finite loss");
  auto g = backward(model, cache, dlogits, {site}, false);
  return g.at_sites.at(site);
}

template <typename Scalar>
std::pair<Scalar, Vector<Scalar>> loss_and_grad_with_replacement(const Model<Scalar>& model,
                                                                 const Tokens& tokens, const Site& site,
                                                                 const Vector<Scalar>& value,
                                                                 const LogitLoss<Scalar>& loss) {
  const auto cache = forward_cached(model, tokens, {Intervention<Scalar>::replace_with(site, value)});
  Matrix<Scalar> dlogits = Matrix<Scalar>::Zero(cache.logits.rows(), cache.logits.cols());
  const Scalar v = loss(cache.logits, dlogits);
  if (!std::isfinite(static_cast<double>(v))) throw NumericError("loss: non-finite value");
  auto g = backward(model, cache, dlogits, {site}, false);
  return {v, g.at_sites.at(site)};
}

// ---------------------------------------------------------------------------
// Losses and decoding

template <typename Scalar>
Vector<Scalar> log_softmax(const Eigen::Ref<const Vector<Scalar>>& row) {
  const Scalar mx = row.maxCoeff();
  const Scalar lse = mx + std::log((row.array() - mx).exp().sum());
  return (row.array() - lse).matrix();
}

template <typename Scalar>
Vector<Scalar> softmax(const Eigen::Ref<const Vector<Scalar>>& row) {
  Vector<Scalar> e = (row.array() - row.maxCoeff()).exp().matrix();
  return e / e.sum();
}

template <typename Scalar>
LogitLoss<Scalar> nll_loss(std::vector<int> positions, Tokens targets) {
  if (positions.size() != targets.size()) throw ValidationError("nll_loss: positions/targets length mismatch");
  return [positions = std::move(positions), targets = std::move(targets)](const Matrix<Scalar>& logits,
                                                                          Matrix<Scalar>& dlogits) {
    Scalar total = 0;
    for (std::size_t k = 0; k < positions.size(); ++k) {
      const Vector<Scalar> row = logits.row(positions[k]).transpose();
      const Vector<Scalar> lp = log_softmax<Scalar>(row);
      total -= lp(targets[k]);
      dlogits.row(positions[k]) += lp.array().exp().matrix().transpose();
      dlogits(positions[k], targets[k]) -= 1;
    }
    return total;
  };
}

template <typename Scalar>
LogitLoss<Scalar> kl_loss(int position, Vector<Scalar> reference_log_probs) {
  return [position, ref = std::move(reference_log_probs)](const Matrix<Scalar>& logits, Matrix<Scalar>& dlogits) {
    const Vector<Scalar> row = logits.row(position).transpose();
    const Vector<Scalar> lp = log_softmax<Scalar>(row);
    const Vector<Scalar> p = lp.array().exp().matrix();
    const Vector<Scalar> diff = lp - ref;
    const Scalar kl = p.dot(diff);
    // d KL / d logit_j = p_j (diff_j - KL)
    dlogits.row(position) += (p.array() * (diff.array() - kl)).matrix().transpose();
    return kl;
  };
}

template <typename Scalar>
LogitLoss<Scalar> linear_loss(Matrix<Scalar> cotangent) {
  return [cot = std::move(cotangent)](const Matrix<Scalar>& logits, Matrix<Scalar>& dlogits) {
    if (cot.rows() != logits.rows() || cot.cols() != logits.cols())
      throw ValidationError("linear_loss: cotangent shape mismatch");
    dlogits += cot;
    return (cot.array() * logits.array()).sum();
  };
}

template <typename Scalar>
Token argmax_token(const Eigen::Ref<const Vector<Scalar>>& row) {
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < row.size(); ++i)
    if (row(i) > row(best)) best = i;
  return static_cast<Token>(best);
}

template <typename Scalar>
Tokens greedy_decode(const Model<Scalar>& model, const Tokens& prompt, int n_new) {
  Tokens seq = prompt;
  for (int k = 0; k < n_new && static_cast<int>(seq.size()) < model.config.max_seq; ++k) {
    const auto logits = forward(model, seq);
    seq.push_back(argmax_token<Scalar>(logits.row(logits.rows() - 1).transpose()));
  }
  return Tokens(seq.begin() + static_cast<std::ptrdiff_t>(prompt.size()), seq.end());
}

template <typename Scalar>
bool teacher_forced_match(const Model<Scalar>& model, const Tokens& prompt, const Tokens& target) {
  if (target.empty()) throw ValidationError("target: empty token sequence");
  Tokens seq = prompt;
  seq.insert(seq.end(), target.begin(), target.end() - 1);
  const auto logits = forward(model, seq);
  for (std::size_t k = 0; k < target.size(); ++k) {
    const Eigen::Index pos = static_cast<Eigen::Index>(prompt.size() + k) - 1;
    if (argmax_token<Scalar>(logits.row(pos).transpose()) != target[k]) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define WILKE_INSTANTIATE(S)                                                                              \
  template struct Model<S>;                                                                               \
  template Model<float> Model<S>::cast<float>() const;                                                    \
  template Model<double> Model<S>::cast<double>() const;                                                  \
  template S gelu<S>(S);                                                                                  \
  template Vector<S> corruption_noise<S>(std::uint64_t, int, int);                                        \
  template ForwardCache<S> forward_cached<S>(const Model<S>&, const Tokens&,                              \
                                             const std::vector<Intervention<S>>&);                        \
  template Matrix<S> forward<S>(const Model<S>&, const Tokens&);                                          \
  template ForwardResult<S> forward_with<S>(const Model<S>&, const Tokens&,                               \
                                            const std::vector<Intervention<S>>&, const std::vector<Site>&); \
  template Gradients<S> backward<S>(const Model<S>&, const ForwardCache<S>&, const Matrix<S>&,            \
                                    const std::vector<Site>&, bool);                                      \
  template Vector<S> grad_at_site<S>(const Model<S>&, const Tokens&, const Site&, const LogitLoss<S>&);   \
  template std::pair<S, Vector<S>> loss_and_grad_with_replacement<S>(                                     \
      const Model<S>&, const Tokens&, const Site&, const Vector<S>&, const LogitLoss<S>&);                \
  template LogitLoss<S> nll_loss<S>(std::vector<int>, Tokens);                                            \
  template LogitLoss<S> kl_loss<S>(int, Vector<S>);                                                       \
  template LogitLoss<S> linear_loss<S>(Matrix<S>);                                                        \
  template Vector<S> log_softmax<S>(const Eigen::Ref<const Vector<S>>&);                                  \
  template Vector<S> softmax<S>(const Eigen::Ref<const Vector<S>>&);                                      \
  template Token argmax_token<S>(const Eigen::Ref<const Vector<S>>&);                                     \
  template Tokens greedy_decode<S>(const Model<S>&, const Tokens&, int);                                  \
  template bool teacher_forced_match<S>(const Model<S>&, const Tokens&, const Tokens&);

WILKE_INSTANTIATE(float)
WILKE_INSTANTIATE(double)

#undef WILKE_INSTANTIATE

}  // namespace wilke

#include "txnf/model.hpp"

#include <algorithm>
#include <cmath>

#include "txnf/error.hpp"
#include "txnf/ops.hpp"

namespace txnf {

using nlohmann::json;
using nlohmann::ordered_json;

void ModelConfig::validate() const {
  auto positive = [](const char* field, std::int64_t v) {
    if (v < 1) throw ValidationError(field, "must be >= 1");
  };
  positive("hidden_dim", hidden_dim);
  positive("n_layers", n_layers);
  positive("n_heads", n_heads);
  positive("input_layers", input_layers);
  positive("ffn_multiplier", ffn_multiplier);
  positive("numeric_width", numeric_width);
  positive("max_seq_len", max_seq_len);
  if (hidden_dim % n_heads != 0) throw ValidationError("hidden_dim", "must be divisible by n_heads");
  for (const auto& [name, dim] : attribute_dims) {
    if (dim < 1) throw ValidationError("attribute_dims." + name, "must be >= 1");
  }
}

ordered_json ModelConfig::to_json() const {
  ordered_json dims = ordered_json::object();
  for (const auto& [k, v] : attribute_dims) dims[k] = v;
  return {{"hidden_dim", hidden_dim},     {"n_layers", n_layers},         {"n_heads", n_heads},
          {"input_layers", input_layers}, {"ffn_multiplier", ffn_multiplier}, {"numeric_width", numeric_width},
          {"max_seq_len", max_seq_len},   {"attribute_dims", dims},       {"init_seed", init_seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "hidden_dim") c.hidden_dim = v.get<int>();
    else if (key == "n_layers") c.n_layers = v.get<int>();
    else if (key == "n_heads") c.n_heads = v.get<int>();
    else if (key == "input_layers") c.input_layers = v.get<int>();
    else if (key == "ffn_multiplier") c.ffn_multiplier = v.get<int>();
    else if (key == "numeric_width") c.numeric_width = v.get<int>();
    else if (key == "max_seq_len") c.max_seq_len = v.get<std::int64_t>();
    else if (key == "attribute_dims") c.attribute_dims = v.get<std::map<std::string, int>>();
    else if (key == "init_seed") c.init_seed = v.get<std::uint64_t>();
    else throw ValidationError("model." + key, "unknown field");
  }
  c.validate();
  return c;
}

int default_attribute_dim(std::int64_t cardinality, int hidden_dim) {
  const auto root = static_cast<int>(std::ceil(std::pow(static_cast<double>(cardinality), 0.25) - 1e-12));
  return std::min(hidden_dim, std::max(1, root) * 8);
}

std::string to_string(TaskMode m) {
  switch (m) {
    case TaskMode::kMulti: return "multi";
    case TaskMode::kMerchantOnly: return "merchant_only";
    case TaskMode::kAbnormalOnly: return "abnormal_only";
  }
  return "?";
}

TaskMode task_mode_from(const std::string& s) {
  if (s == "multi") return TaskMode::kMulti;
  if (s == "merchant_only") return TaskMode::kMerchantOnly;
  if (s == "abnormal_only") return TaskMode::kAbnormalOnly;
  throw ValidationError("task_mode", "unknown task mode '" + s + "'");
}

double sample_numerical(double mu, double sigma, Rng& rng) {
  if (!(sigma > 0)) throw Error("sample_numerical: sigma must be positive");
  return std::exp(rng.normal(mu, sigma));
}

namespace {

template <class T>
Mat<T> random_matrix(Eigen::Index rows, Eigen::Index cols, double sd, Rng& rng) {
  Mat<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.normal() * sd);
  return m;
}

}  // namespace

template <class T>
Model<T>::Model(Schema schema, ModelConfig config) : schema_(std::move(schema)), config_(std::move(config)) {
  config_.validate();
  schema_.validate(true);
  const Layout& L = schema_.layout();
  const auto& attrs = schema_.attributes();
  auto attr = [&](int i) -> const AttributeSpec& { return attrs[static_cast<std::size_t>(i)]; };

  for (std::size_t c = 0; c < L.static_num.size(); ++c) static_num_cols_.push_back(static_cast<int>(c));
  for (std::size_t c = 0; c < L.static_cat.size(); ++c) static_cat_cols_.push_back(static_cast<int>(c));
  int slot_num = 0, slot_cat = 0;
  for (std::size_t c = 0; c < L.dyn_num.size(); ++c) {
    const auto& a = attr(L.dyn_num[c]);
    if (a.has(kInput)) {
      dyn_num_cols_.push_back(static_cast<int>(c));
      dyn_num_attrs_.push_back(L.dyn_num[c]);
    }
    if (a.has(kNextTarget)) {
      next_.push_back({a.name, L.dyn_num[c], Kind::kNumerical, CardinalityClass::kNumerical, static_cast<int>(c), slot_num++});
    }
  }
  for (std::size_t c = 0; c < L.dyn_cat.size(); ++c) {
    const auto& a = attr(L.dyn_cat[c]);
    if (a.has(kInput)) {
      dyn_cat_cols_.push_back(static_cast<int>(c));
      dyn_cat_attrs_.push_back(L.dyn_cat[c]);
    }
    if (a.has(kNextTarget)) {
      next_.push_back({a.name, L.dyn_cat[c], Kind::kCategorical, schema_.class_of(a.name), static_cast<int>(c), slot_cat++});
    }
  }
  slot_num = slot_cat = 0;
  for (std::size_t c = 0; c < L.sig_num.size(); ++c) {
    const auto& a = attr(L.sig_num[c]);
    current_.push_back({a.name, L.sig_num[c], Kind::kNumerical, CardinalityClass::kNumerical, static_cast<int>(c), slot_num++});
  }
  for (std::size_t c = 0; c < L.sig_cat.size(); ++c) {
    const auto& a = attr(L.sig_cat[c]);
    current_.push_back({a.name, L.sig_cat[c], Kind::kCategorical, schema_.class_of(a.name), static_cast<int>(c), slot_cat++});
  }

  Rng rng = Rng(config_.init_seed).split("init");
  for (const auto& a : attrs) {
    if (!a.categorical()) continue;
    const int dim = attribute_dim(a.name);
    params_.add("emb." + a.name, random_matrix<T>(*a.cardinality, dim, 1.0 / std::sqrt(double(dim)), rng));
  }
  add_input_module("static", L.static_num, L.static_cat, rng);
  add_input_module("dynamic", dyn_num_attrs_, dyn_cat_attrs_, rng);

  const int d = config_.hidden_dim, f = d * config_.ffn_multiplier;
  const double sd = 1.0 / std::sqrt(double(d));
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string b = "block" + std::to_string(l) + ".";
    params_.add(b + "ln1.g", Mat<T>::Ones(1, d), false);
    params_.add(b + "ln1.b", Mat<T>::Zero(1, d), false);
    for (const char* n : {"q", "k", "v", "o"}) {
      params_.add(b + "attn." + n + ".w", random_matrix<T>(d, d, sd, rng));
      params_.add(b + "attn." + n + ".b", Mat<T>::Zero(1, d), false);
    }
    params_.add(b + "ln2.g", Mat<T>::Ones(1, d), false);
    params_.add(b + "ln2.b", Mat<T>::Zero(1, d), false);
    params_.add(b + "ffn.1.w", random_matrix<T>(d, f, sd, rng));
    params_.add(b + "ffn.1.b", Mat<T>::Zero(1, f), false);
    params_.add(b + "ffn.2.w", random_matrix<T>(f, d, 1.0 / std::sqrt(double(f)), rng));
    params_.add(b + "ffn.2.b", Mat<T>::Zero(1, d), false);
  }
  params_.add("final_ln.g", Mat<T>::Ones(1, d), false);
  params_.add("final_ln.b", Mat<T>::Zero(1, d), false);
  add_head("head.next", next_, rng);
  add_head("head.current", current_, rng);
}

template <class T>
int Model<T>::attribute_dim(const std::string& name) const {
  const auto it = config_.attribute_dims.find(name);
  if (it != config_.attribute_dims.end()) return it->second;
  const auto& a = schema_.attribute(name);
  if (!a.categorical()) throw ValidationError(name, "not a categorical attribute");
  return default_attribute_dim(*a.cardinality, config_.hidden_dim);
}

template <class T>
void Model<T>::add_input_module(const std::string& prefix, const std::vector<int>& num_attrs,
                                const std::vector<int>& cat_attrs, Rng& rng) {
  const int d = config_.hidden_dim;
  int width = 0;
  if (!num_attrs.empty()) {
    const int n = static_cast<int>(num_attrs.size()), w = n * config_.numeric_width;
    params_.add(prefix + ".num.w", random_matrix<T>(n, w, 1.0 / std::sqrt(double(n)), rng));
    params_.add(prefix + ".num.b", Mat<T>::Zero(1, w), false);
    width += w;
  }
  for (int a : cat_attrs) width += attribute_dim(schema_.attributes()[static_cast<std::size_t>(a)].name);
  if (width == 0) {
    params_.add(prefix + ".token", random_matrix<T>(1, d, 1.0, rng));
    return;
  }
  for (int l = 0; l < config_.input_layers; ++l) {
    const int in = l == 0 ? width : d;
    params_.add(prefix + ".l" + std::to_string(l) + ".w", random_matrix<T>(in, d, 1.0 / std::sqrt(double(in)), rng));
    params_.add(prefix + ".l" + std::to_string(l) + ".b", Mat<T>::Zero(1, d), false);
  }
}

template <class T>
void Model<T>::add_head(const std::string& prefix, const std::vector<Target>& targets, Rng& rng) {
  const int d = config_.hidden_dim;
  const double sd = 1.0 / std::sqrt(double(d));
  params_.add(prefix + ".trunk.w", random_matrix<T>(d, d, sd, rng));
  params_.add(prefix + ".trunk.b", Mat<T>::Zero(1, d), false);
  int n_num = 0;
  for (const auto& t : targets) n_num += t.kind == Kind::kNumerical ? 1 : 0;
  if (n_num > 0) {
    params_.add(prefix + ".mu.w", random_matrix<T>(d, n_num, sd, rng));
    params_.add(prefix + ".mu.b", Mat<T>::Zero(1, n_num), false);
    params_.add(prefix + ".sigma.w", random_matrix<T>(d, n_num, sd, rng));
    params_.add(prefix + ".sigma.b", Mat<T>::Constant(1, n_num, T(0.5413)), false);  // softplus⁻¹(1)
  }
  for (const auto& t : targets) {
    if (t.kind != Kind::kCategorical) continue;
    const int da = attribute_dim(t.name);
    params_.add(prefix + "." + t.name + ".w", random_matrix<T>(d, da, sd, rng));
    params_.add(prefix + "." + t.name + ".b", Mat<T>::Zero(1, da), false);
  }
}

template <class T>
Var Model<T>::input_module(Graph<T>& g, const std::string& prefix, const std::vector<int>& num_cols,
                           const std::vector<int>& num_attrs, const std::vector<float>& num_block, int num_width,
                           const std::vector<int>& cat_cols, const std::vector<int>& cat_attrs,
                           const std::vector<std::int32_t>& cat_block, int cat_width, std::size_t rows) {
  (void)num_attrs;
  std::vector<Var> parts;
  if (!num_cols.empty()) {
    Mat<T> x(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(num_cols.size()));
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < num_cols.size(); ++c) {
        const float v = num_block[r * static_cast<std::size_t>(num_width) + static_cast<std::size_t>(num_cols[c])];
        x(Eigen::Index(r), Eigen::Index(c)) = static_cast<T>(std::log1p(std::max(0.0, static_cast<double>(v))));
      }
    }
    parts.push_back(ops::linear(g, g.constant(std::move(x)), p(g, prefix + ".num.w"), p(g, prefix + ".num.b")));
  }
  for (std::size_t c = 0; c < cat_cols.size(); ++c) {
    const auto& name = schema_.attributes()[static_cast<std::size_t>(cat_attrs[c])].name;
    std::vector<std::int32_t> idx(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      idx[r] = cat_block[r * static_cast<std::size_t>(cat_width) + static_cast<std::size_t>(cat_cols[c])];
    }
    parts.push_back(ops::gather_rows(g, p(g, "emb." + name), std::move(idx)));
  }
  if (parts.empty()) return ops::gather_rows(g, p(g, prefix + ".token"), std::vector<std::int32_t>(rows, 0));
  Var x = parts.size() == 1 ? parts[0] : ops::concat_cols(g, parts);
  for (int l = 0; l < config_.input_layers; ++l) {
    const std::string n = prefix + ".l" + std::to_string(l);
    x = ops::gelu(g, ops::linear(g, x, p(g, n + ".w"), p(g, n + ".b")));
  }
  return x;
}

template <class T>
typename Model<T>::Head Model<T>::head(Graph<T>& g, const std::string& prefix, const std::vector<Target>& targets,
                                       Var h) {
  Head out;
  Var trunk = ops::gelu(g, ops::linear(g, h, p(g, prefix + ".trunk.w"), p(g, prefix + ".trunk.b")));
  if (params_.contains(prefix + ".mu.w")) {
    out.mu = ops::linear(g, trunk, p(g, prefix + ".mu.w"), p(g, prefix + ".mu.b"));
    out.sigma = ops::softplus(g, ops::linear(g, trunk, p(g, prefix + ".sigma.w"), p(g, prefix + ".sigma.b")), T(1e-4));
  }
  for (const auto& t : targets) {
    if (t.kind != Kind::kCategorical) continue;
    out.vecs.push_back(ops::linear(g, trunk, p(g, prefix + "." + t.name + ".w"), p(g, prefix + "." + t.name + ".b")));
  }
  return out;
}

template <class T>
typename Model<T>::Outputs Model<T>::forward(Graph<T>& g, const Batch& batch) {
  if (batch.steps > config_.max_seq_len) {
    throw ValidationError("batch.steps", "sequence length " + std::to_string(batch.steps) + " exceeds max_seq_len " +
                                             std::to_string(config_.max_seq_len));
  }
  if (!(batch.widths == Widths::of(schema_))) throw SchemaMismatch("batch layout does not match the model schema");
  const Layout& L = schema_.layout();
  const int B = batch.batch_size, T_ = batch.steps, S = T_ + 1;
  const std::size_t rows = batch.rows();

  Var stat = input_module(g, "static", static_num_cols_, L.static_num, batch.static_num, batch.widths.static_num,
                          static_cat_cols_, L.static_cat, batch.static_cat, batch.widths.static_cat,
                          static_cast<std::size_t>(B));
  Var dyn = input_module(g, "dynamic", dyn_num_cols_, dyn_num_attrs_, batch.dyn_num, batch.widths.dyn_num,
                         dyn_cat_cols_, dyn_cat_attrs_, batch.dyn_cat, batch.widths.dyn_cat, rows);

  // Sequence rows b*S + s: s = 0 is the static token, s = 1 + t is transaction t.
  std::vector<std::int32_t> order(static_cast<std::size_t>(B) * S);
  std::vector<std::uint8_t> key_valid(order.size());
  for (int b = 0; b < B; ++b) {
    order[static_cast<std::size_t>(b * S)] = b;
    key_valid[static_cast<std::size_t>(b * S)] = 1;
    for (int t = 0; t < T_; ++t) {
      order[static_cast<std::size_t>(b * S + 1 + t)] = B + b * T_ + t;
      key_valid[static_cast<std::size_t>(b * S + 1 + t)] = batch.valid[static_cast<std::size_t>(b * T_ + t)];
    }
  }
  Var x = ops::gather_rows(g, ops::concat_rows(g, {stat, dyn}), std::move(order));

  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string b = "block" + std::to_string(l) + ".";
    Var h = ops::layer_norm(g, x, p(g, b + "ln1.g"), p(g, b + "ln1.b"));
    Var q = ops::linear(g, h, p(g, b + "attn.q.w"), p(g, b + "attn.q.b"));
    Var k = ops::linear(g, h, p(g, b + "attn.k.w"), p(g, b + "attn.k.b"));
    Var v = ops::linear(g, h, p(g, b + "attn.v.w"), p(g, b + "attn.v.b"));
    Var a = ops::causal_attention(g, q, k, v, B, S, config_.n_heads, key_valid);
    x = ops::add(g, x, ops::linear(g, a, p(g, b + "attn.o.w"), p(g, b + "attn.o.b")));
    Var h2 = ops::layer_norm(g, x, p(g, b + "ln2.g"), p(g, b + "ln2.b"));
    Var f = ops::gelu(g, ops::linear(g, h2, p(g, b + "ffn.1.w"), p(g, b + "ffn.1.b")));
    x = ops::add(g, x, ops::linear(g, f, p(g, b + "ffn.2.w"), p(g, b + "ffn.2.b")));
  }
  x = ops::layer_norm(g, x, p(g, "final_ln.g"), p(g, "final_ln.b"));

  std::vector<std::int32_t> positions(rows);
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t < T_; ++t) positions[static_cast<std::size_t>(b * T_ + t)] = b * S + 1 + t;
  }
  Outputs out;
  out.batch = B;
  out.steps = T_;
  out.hidden = ops::gather_rows(g, x, std::move(positions));
  out.next = head(g, "head.next", next_, out.hidden);
  out.current = head(g, "head.current", current_, out.hidden);
  return out;
}

template <class T>
Var Model<T>::logits(Graph<T>& g, Var head_vec, const std::string& attribute) {
  return ops::matmul_nt(g, head_vec, p(g, "emb." + attribute));
}

template <class T>
Var Model<T>::loss(Graph<T>& g, const Outputs& out, const Batch& batch, const LossOptions& options, Rng& rng,
                   LossReport* report) {
  const std::size_t rows = batch.rows();
  const Widths& w = batch.widths;
  const std::string& pivot = schema_.attributes()[static_cast<std::size_t>(schema_.layout().pivot)].name;

  std::vector<Var> scalars;
  LossReport rep;
  rep.pivot = pivot;
  auto run = [&](const std::vector<Target>& targets, const Head& hd, bool next) {
    const std::vector<std::uint8_t>& mask = next ? batch.next_mask : batch.scored;
    std::int64_t positions = 0;
    for (auto m : mask) positions += m ? 1 : 0;
    for (const auto& t : targets) {
      Var s;
      if (t.kind == Kind::kNumerical) {
        const std::vector<float>& block = next ? batch.next_num : batch.sig_num;
        const int width = next ? w.dyn_num : w.sig_num;
        std::vector<T> y(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          const double v = block[r * static_cast<std::size_t>(width) + static_cast<std::size_t>(t.column)];
          y[r] = static_cast<T>(std::log(std::max(v, 1e-6)));
        }
        s = nll_loss(g, hd.mu, hd.sigma, t.slot, std::move(y), mask);
      } else {
        const std::vector<std::int32_t>& block = next ? batch.next_cat : batch.sig_cat;
        const int width = next ? w.dyn_cat : w.sig_cat;
        std::vector<std::int32_t> labels(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          labels[r] = block[r * static_cast<std::size_t>(width) + static_cast<std::size_t>(t.column)];
        }
        const Var vec = hd.vecs[static_cast<std::size_t>(t.slot)];
        if (t.cls == CardinalityClass::kHighCat) {
          s = hcat_loss(g, vec, p(g, "emb." + t.name), std::move(labels), mask, batch.batch_size, batch.steps,
                        options.plan, rng);
        } else {
          s = softmax_ce_loss(g, logits(g, vec, t.name), std::move(labels), mask);
        }
      }
      scalars.push_back(s);
      rep.entries.push_back({t.name, static_cast<double>(g.value(s)(0, 0)), 0.0, positions});
    }
  };
  run(next_, out.next, true);
  run(current_, out.current, false);

  std::vector<T> weights(scalars.size(), T(0));
  std::size_t pivot_at = 0;
  for (std::size_t i = 0; i < rep.entries.size(); ++i) {
    if (rep.entries[i].name == pivot) pivot_at = i;
  }
  switch (options.task) {
    case TaskMode::kMulti: {
      std::vector<double> others;
      for (std::size_t i = 0; i < rep.entries.size(); ++i) {
        if (i != pivot_at) others.push_back(rep.entries[i].value);
      }
      const AggregateWeights aw = aggregate(rep.entries[pivot_at].value, others, options.aggregation);
      std::size_t k = 0;
      for (std::size_t i = 0; i < rep.entries.size(); ++i) {
        rep.entries[i].weight = i == pivot_at ? aw.pivot_weight : aw.weights[k++];
      }
      break;
    }
    case TaskMode::kMerchantOnly: {
      bool found = false;
      for (auto& e : rep.entries) {
        if (e.name == options.merchant_attribute && !found) {
          e.weight = 1.0;
          found = true;
        }
      }
      if (!found) throw ValidationError("merchant_attribute", "'" + options.merchant_attribute + "' is not a target");
      break;
    }
    case TaskMode::kAbnormalOnly:
      rep.entries[pivot_at].weight = 1.0;
      break;
  }
  rep.aggregate = 0.0;
  for (std::size_t i = 0; i < rep.entries.size(); ++i) {
    weights[i] = static_cast<T>(rep.entries[i].weight);
    rep.aggregate += rep.entries[i].weight * rep.entries[i].value;
  }
  Var total = ops::weighted_sum(g, scalars, weights);
  if (report) *report = std::move(rep);
  return total;
}

template <class T>
const Mat<T>& Model<T>::embeddings(const std::string& attribute) const {
  if (!params_.contains("emb." + attribute)) throw ValidationError(attribute, "no embedding table");
  return params_.get("emb." + attribute).value;
}

template <class T>
void Model<T>::set_embeddings(const std::string& attribute, const Mat<T>& table) {
  auto& prm = params_.get("emb." + attribute);
  if (prm.value.rows() != table.rows() || prm.value.cols() != table.cols()) {
    throw ValidationError(attribute, "embedding table shape mismatch");
  }
  prm.value = table;
}

template <class T>
Mat<T> Model<T>::card_embeddings(const Batch& batch) {
  Graph<T> g(false);
  const Outputs out = forward(g, batch);
  const Mat<T>& h = g.value(out.hidden);
  Mat<T> e(batch.batch_size, h.cols());
  for (int b = 0; b < batch.batch_size; ++b) {
    const int last = std::max(0, batch.lengths[static_cast<std::size_t>(b)] - 1);
    e.row(b) = h.row(Eigen::Index(b) * batch.steps + last);
  }
  return e;
}

template class Model<float>;
template class Model<double>;

}  // namespace txnf

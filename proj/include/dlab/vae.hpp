#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dlab/autodiff.hpp"
#include "dlab/dataset.hpp"
#include "dlab/optimizer.hpp"

namespace dlab {

struct ModelConfig {
  std::string arch = "mlp";  // "linear" | "mlp"
  int64_t input_dim = 0;
  int64_t latent_dim = 0;
  std::vector<int64_t> hidden;  // encoder stack; decoder mirrors it
  double beta = 1.0;
  bool variational = true;
};

// Parameters live in a fixed-order flat vector:
//   enc stack (W,b per hidden layer), mu head (W,b), log-var head (W,b),
//   dec stack (W,b per reversed hidden layer), output layer (W,b).
// Weights are row-convention: activations are [batch x dim], y = x W + b.
struct VaeModel {
  ModelConfig config;
  std::vector<Param> params;

  size_t enc_stack() const { return config.arch == "linear" ? 0 : config.hidden.size(); }
  Param& enc_w(size_t i) { return params[2 * i]; }
  Param& enc_b(size_t i) { return params[2 * i + 1]; }
  Param& mu_w() { return params[2 * enc_stack()]; }
  Param& mu_b() { return params[2 * enc_stack() + 1]; }
  Param& lv_w() { return params[2 * enc_stack() + 2]; }
  Param& lv_b() { return params[2 * enc_stack() + 3]; }
  Param& dec_w(size_t i) { return params[2 * enc_stack() + 4 + 2 * i]; }
  Param& dec_b(size_t i) { return params[2 * enc_stack() + 4 + 2 * i + 1]; }
  Param& out_w() { return params[4 * enc_stack() + 4]; }
  Param& out_b() { return params[4 * enc_stack() + 5]; }

  std::vector<Param*> param_ptrs() {
    std::vector<Param*> out;
    out.reserve(params.size());
    for (Param& p : params) out.push_back(&p);
    return out;
  }

  // decoder stack plus the output layer
  std::vector<Param*> decoder_params() {
    std::vector<Param*> out;
    for (size_t i = 2 * enc_stack() + 4; i < params.size(); ++i) out.push_back(&params[i]);
    return out;
  }

  // Column-convention decoder matrix [d x k], the object the SVD analysis
  // consumes. Linear architecture only.
  NdArray decoder_matrix() {
    if (config.arch != "linear")
      throw ValidationError("decoder_matrix: only defined for the linear architecture");
    return transpose(out_w().value);
  }
  NdArray encoder_matrix() {
    if (config.arch != "linear")
      throw ValidationError("encoder_matrix: only defined for the linear architecture");
    return transpose(mu_w().value);
  }
};

namespace detail {

inline NdArray fan_in_uniform(int64_t rows, int64_t cols, Rng& rng) {
  NdArray w = NdArray::zeros({rows, cols});
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  fill_uniform(w, rng, -bound, bound);
  return w;
}

}  // namespace detail

inline VaeModel make_vae_model(const ModelConfig& config, uint64_t seed) {
  if (config.input_dim < 1 || config.latent_dim < 1)
    throw ValidationError("make_vae_model: input_dim and latent_dim must be positive");
  if (config.arch != "linear" && config.arch != "mlp")
    throw ValidationError("make_vae_model: unknown arch " + config.arch);
  if (config.arch == "mlp" && config.hidden.empty())
    throw ValidationError("make_vae_model: mlp needs at least one hidden layer");
  if (config.beta < 0.0) throw ValidationError("make_vae_model: beta must be >= 0");

  VaeModel m;
  m.config = config;
  if (config.arch == "linear") m.config.hidden.clear();
  Rng rng(mix_seed(seed, 0x1417));

  const auto& hidden = m.config.hidden;
  auto push_dense = [&](const std::string& name, int64_t in, int64_t out, bool zero_init) {
    m.params.emplace_back(name + ".W", zero_init ? NdArray::zeros({in, out})
                                                 : detail::fan_in_uniform(in, out, rng));
    m.params.emplace_back(name + ".b", NdArray::zeros({out}));
  };

  int64_t cur = config.input_dim;
  for (size_t i = 0; i < hidden.size(); ++i) {
    push_dense("enc." + std::to_string(i), cur, hidden[i], false);
    cur = hidden[i];
  }
  push_dense("enc.mu", cur, config.latent_dim, false);
  push_dense("enc.lv", cur, config.latent_dim, true);  // log sigma^2 starts at 0
  cur = config.latent_dim;
  for (size_t i = 0; i < hidden.size(); ++i) {
    const int64_t h = hidden[hidden.size() - 1 - i];
    push_dense("dec." + std::to_string(i), cur, h, false);
    cur = h;
  }
  push_dense("dec.out", cur, config.input_dim, false);
  return m;
}

struct VaeForward {
  Value mu;
  Value log_var;
  Value z;
  Value recon;
};

inline Value dense(Tape& t, Value x, Param& W, Param& b) {
  const int64_t rows = x.payload().shape[0];
  const int64_t cols = W.value.shape[1];
  return add(matmul(x, t.param(W)), broadcast(t.param(b), {rows, cols}));
}

inline Value decode_on_tape(Tape& t, VaeModel& m, Value z) {
  Value g = z;
  for (size_t i = 0; i < m.enc_stack(); ++i) g = relu(dense(t, g, m.dec_w(i), m.dec_b(i)));
  return dense(t, g, m.out_w(), m.out_b());
}

// noise must be [b x k], standard normal, caller-seeded. Ignored when the
// model is non-variational (z = mu).
inline VaeForward vae_forward(VaeModel& m, Tape& t, Value batch, Value noise) {
  const NdArray& x = batch.payload();
  if (x.rank() != 2 || x.shape[1] != m.config.input_dim)
    throw ValidationError("vae_forward: batch shape " + shape_str(x.shape) +
                          " does not match input_dim " + std::to_string(m.config.input_dim));
  if (m.config.variational) {
    const NdArray& e = noise.payload();
    if (e.rank() != 2 || e.shape[0] != x.shape[0] || e.shape[1] != m.config.latent_dim)
      throw ValidationError("vae_forward: noise shape " + shape_str(e.shape) +
                            " does not match [batch x latent_dim]");
  }

  Value h = batch;
  for (size_t i = 0; i < m.enc_stack(); ++i) h = relu(dense(t, h, m.enc_w(i), m.enc_b(i)));
  VaeForward f;
  f.mu = dense(t, h, m.mu_w(), m.mu_b());
  f.log_var = dense(t, h, m.lv_w(), m.lv_b());
  f.z = m.config.variational ? reparameterize(f.mu, f.log_var, noise) : f.mu;

  f.recon = decode_on_tape(t, m, f.z);
  return f;
}

struct LossBreakdown {
  double total = 0.0;
  double rec = 0.0;
  double kl = 0.0;
  double rec_mu = 0.0;
  double rec_stoch = 0.0;
  double kl_polarized = 0.0;
};

struct LossGraph {
  Value total;  // optimize this
  LossBreakdown numbers;
  VaeForward forward;
};

// rec: mean over the batch of ||dec(enc(x)) - x||^2 (sum over features).
// kl: 1/2 sum_j (mu^2 + sigma^2 - log sigma^2 - 1), batch-averaged.
// total = rec + beta * kl for variational models, rec otherwise.
// rec_mu, rec_stoch, kl_polarized are recorded alongside; only total carries
// gradients into the optimizer step.
inline LossGraph beta_vae_loss(VaeModel& m, Tape& t, Value batch, Value noise, double beta) {
  if (beta < 0.0) throw ValidationError("beta_vae_loss: beta must be >= 0, got " +
                                        std::to_string(beta));
  const double b = static_cast<double>(batch.payload().shape[0]);

  LossGraph lg;
  lg.forward = vae_forward(m, t, batch, noise);
  const VaeForward& f = lg.forward;

  Value rec = scale(sum(square(sub(f.recon, batch))), 1.0 / b);
  Value ones = t.constant(NdArray::full(f.mu.payload().shape, 1.0));
  Value kl_terms = sub(add(square(f.mu), exp(f.log_var)), add(f.log_var, ones));
  Value kl = scale(sum(kl_terms), 0.5 / b);

  lg.total = m.config.variational ? add(rec, scale(kl, beta)) : rec;
  lg.numbers.rec = rec.payload().data[0];
  lg.numbers.kl = kl.payload().data[0];
  lg.numbers.total = lg.total.payload().data[0];
  {
    const NdArray& mu = f.mu.payload();
    const NdArray& lv = f.log_var.payload();
    double acc = 0.0;
    for (size_t i = 0; i < mu.data.size(); ++i) acc += mu.data[i] * mu.data[i] - lv.data[i];
    lg.numbers.kl_polarized = acc / b;
  }

  if (m.config.variational) {
    // second decoder pass at z = mu; forward-only, no gradient reaches it
    Value g = f.mu;
    for (size_t i = 0; i < m.enc_stack(); ++i) g = relu(dense(t, g, m.dec_w(i), m.dec_b(i)));
    Value dec_mu = dense(t, g, m.out_w(), m.out_b());
    lg.numbers.rec_mu = sum_of(square(sub(dec_mu, batch)).payload()) / b;
    lg.numbers.rec_stoch = sum_of(square(sub(f.recon, dec_mu)).payload()) / b;
  } else {
    lg.numbers.rec_mu = lg.numbers.rec;
    lg.numbers.rec_stoch = 0.0;
  }
  return lg;
}

// latent j is polarized iff E_i[sigma_j^2] <= ratio * E_i[-log sigma_j^2].
inline std::vector<bool> detect_polarized_regime(const NdArray& sigma_sq_table,
                                                 double ratio_threshold = 0.2) {
  if (sigma_sq_table.rank() != 2)
    throw ValidationError("detect_polarized_regime: expects [n x k] table");
  const int64_t n = sigma_sq_table.shape[0], k = sigma_sq_table.shape[1];
  std::vector<bool> out(static_cast<size_t>(k), false);
  for (int64_t j = 0; j < k; ++j) {
    double mean_var = 0.0, mean_neg_log = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double v = sigma_sq_table.at(i, j);
      if (v <= 0.0)
        throw ValidationError("detect_polarized_regime: sigma^2 must be positive");
      mean_var += v;
      mean_neg_log -= std::log(v);
    }
    mean_var /= static_cast<double>(n);
    mean_neg_log /= static_cast<double>(n);
    out[static_cast<size_t>(j)] = mean_var <= ratio_threshold * mean_neg_log;
  }
  return out;
}

// Posterior tables over a full data matrix, noise-free (z = mu).
struct Representation {
  NdArray mu;        // [n x k]
  NdArray sigma_sq;  // [n x k]
  std::vector<double> mean_sigma_sq;
};

inline Representation eval_representation(VaeModel& m, const NdArray& images) {
  Tape t;
  Value batch = t.constant(images);
  Value h = batch;
  for (size_t i = 0; i < m.enc_stack(); ++i) h = relu(dense(t, h, m.enc_w(i), m.enc_b(i)));
  Value mu = dense(t, h, m.mu_w(), m.mu_b());
  Value lv = dense(t, h, m.lv_w(), m.lv_b());

  Representation rep;
  rep.mu = mu.payload();
  rep.sigma_sq = lv.payload();
  for (double& v : rep.sigma_sq.data) v = std::exp(v);
  rep.mean_sigma_sq.assign(static_cast<size_t>(m.config.latent_dim), 0.0);
  const int64_t n = images.shape[0];
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m.config.latent_dim; ++j)
      rep.mean_sigma_sq[static_cast<size_t>(j)] += rep.sigma_sq.at(i, j);
  for (double& v : rep.mean_sigma_sq) v /= static_cast<double>(n);
  return rep;
}

// Decoder pass alone (z -> reconstruction), noise-free.
inline NdArray decode_batch(VaeModel& m, const NdArray& z) {
  Tape t;
  Value g = t.constant(z);
  for (size_t i = 0; i < m.enc_stack(); ++i) g = relu(dense(t, g, m.dec_w(i), m.dec_b(i)));
  return dense(t, g, m.out_w(), m.out_b()).payload();
}

// Full-data loss with zero noise (z = mu), for before/after comparisons.
inline LossBreakdown evaluate_loss(VaeModel& m, const NdArray& images, double beta) {
  Tape t;
  Value batch = t.constant(images);
  Value noise = t.constant(NdArray::zeros({images.shape[0], m.config.latent_dim}));
  return beta_vae_loss(m, t, batch, noise, beta).numbers;
}

struct TrainHyper {
  double beta = -1.0;  // < 0 means "use config.beta"
  double lr = 1e-4;
  int64_t batch_size = 64;
  int64_t steps = 0;
  uint64_t seed = 0;
};

struct TrainedRun {
  VaeModel model;
  std::vector<double> loss_curve;
  std::vector<double> rec_curve;
  std::vector<double> kl_curve;
  Representation rep;  // final posterior tables over the dataset
  LossBreakdown initial_eval;
  LossBreakdown final_eval;
  double beta_used = 0.0;
  uint64_t seed = 0;
  bool failed = false;
  int64_t failed_step = -1;
  bool loss_flagged = false;  // smoothed loss increased somewhere
};

// Deterministic given hyper.seed. Model is taken by value; the trained copy
// is returned inside the run.
inline TrainedRun train_model(VaeModel model, const LabeledDataset& ds, const TrainHyper& hyper) {
  if (ds.dim() != model.config.input_dim)
    throw ValidationError("train_model: dataset dim " + std::to_string(ds.dim()) +
                          " != model input_dim " + std::to_string(model.config.input_dim));
  if (hyper.steps < 1) throw ValidationError("train_model: steps must be >= 1");
  if (hyper.batch_size < 1) throw ValidationError("train_model: batch_size must be >= 1");
  const double beta = hyper.beta >= 0.0 ? hyper.beta : model.config.beta;

  TrainedRun run;
  run.beta_used = beta;
  run.seed = hyper.seed;
  run.initial_eval = evaluate_loss(model, ds.images, beta);

  Rng batch_rng(mix_seed(hyper.seed, 0xba7c4));
  Rng noise_rng(mix_seed(hyper.seed, 0x0153));
  auto ptrs = model.param_ptrs();
  AdamState opt(ptrs, hyper.lr);

  const int64_t n = ds.n(), d = ds.dim(), k = model.config.latent_dim;
  const int64_t b = std::min(hyper.batch_size, n);
  NdArray X = NdArray::zeros({b, d});
  NdArray E = NdArray::zeros({b, k});

  run.loss_curve.reserve(static_cast<size_t>(hyper.steps));
  for (int64_t step = 0; step < hyper.steps; ++step) {
    for (int64_t i = 0; i < b; ++i) {
      const int64_t row = batch_rng.index(n);
      for (int64_t j = 0; j < d; ++j) X.at(i, j) = ds.images.at(row, j);
    }
    if (model.config.variational) fill_normal(E, noise_rng);

    Tape t;
    LossGraph lg = beta_vae_loss(model, t, t.constant(X), t.constant(E), beta);
    if (!std::isfinite(lg.numbers.total)) {
      run.failed = true;
      run.failed_step = step;
      break;
    }
    run.loss_curve.push_back(lg.numbers.total);
    run.rec_curve.push_back(lg.numbers.rec);
    run.kl_curve.push_back(lg.numbers.kl);
    backward(lg.total);
    adam_step(opt, ptrs);
  }

  if (!run.failed) {
    run.final_eval = evaluate_loss(model, ds.images, beta);
    run.rep = eval_representation(model, ds.images);
    // smoothed monotonicity: decile means may not rise more than 5%
    const size_t chunks = 10;
    const size_t len = run.loss_curve.size();
    if (len >= chunks * 2) {
      double prev = 0.0;
      for (size_t c = 0; c < chunks; ++c) {
        const size_t lo = c * len / chunks, hi = (c + 1) * len / chunks;
        double m_ = 0.0;
        for (size_t i = lo; i < hi; ++i) m_ += run.loss_curve[i];
        m_ /= static_cast<double>(hi - lo);
        if (c > 0 && m_ > prev * 1.05) run.loss_flagged = true;
        prev = m_;
      }
    }
  }
  run.model = std::move(model);
  return run;
}

}  // namespace dlab

#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dlab/autodiff.hpp"
#include "dlab/dataset.hpp"
#include "dlab/metrics.hpp"
#include "dlab/optimizer.hpp"
#include "dlab/vae.hpp"

namespace dlab {

// Additive image manipulation network: factor values pass through a
// single-neuron bottleneck before being rendered back up to image size, so
// the perturbation is a function of a scalar summary of w. The tanh output
// keeps every entry in (-1, 1).
struct ManipulatorModel {
  int num_factors = 0;
  int64_t output_dim = 0;
  std::vector<Param> params;  // (W, b) per layer

  Param& weight(size_t layer) { return params[2 * layer]; }
  Param& bias(size_t layer) { return params[2 * layer + 1]; }
  size_t layers() const { return params.size() / 2; }

  std::vector<Param*> param_ptrs() {
    std::vector<Param*> out;
    out.reserve(params.size());
    for (Param& p : params) out.push_back(&p);
    return out;
  }
};

inline ManipulatorModel make_manipulator(int num_factors, int64_t output_dim,
                                         uint64_t seed) {
  if (num_factors < 1)
    throw ValidationError("make_manipulator: needs at least one factor");
  if (output_dim < 1)
    throw ValidationError("make_manipulator: output_dim must be positive");
  ManipulatorModel m;
  m.num_factors = num_factors;
  m.output_dim = output_dim;
  Rng rng(mix_seed(seed, 0x3a17u));
  const std::vector<std::pair<int64_t, int64_t>> dims = {
      {num_factors, 16}, {16, 1}, {1, 128}, {128, 256}, {256, output_dim}};
  for (size_t i = 0; i < dims.size(); ++i) {
    Param w;
    w.name = "manip." + std::to_string(i) + ".W";
    w.value = detail::fan_in_uniform(dims[i].first, dims[i].second, rng);
    w.grad = NdArray::zeros(w.value.shape);
    m.params.push_back(std::move(w));
    Param b;
    b.name = "manip." + std::to_string(i) + ".b";
    b.value = NdArray::zeros({dims[i].second});
    b.grad = NdArray::zeros(b.value.shape);
    m.params.push_back(std::move(b));
  }
  return m;
}

// w: [b x num_factors] -> [b x output_dim]; relu hidden layers except the
// bottleneck neuron, tanh on the bottleneck and the output.
inline Value manipulator_forward(Tape& t, ManipulatorModel& m, Value w) {
  if (w.payload().rank() != 2 || w.payload().shape[1] != m.num_factors)
    throw ValidationError("manipulator_forward: input shape " +
                          shape_str(w.payload().shape) + " does not match num_factors " +
                          std::to_string(m.num_factors));
  Value h = relu(dense(t, w, m.weight(0), m.bias(0)));
  h = tanh(dense(t, h, m.weight(1), m.bias(1)));
  h = relu(dense(t, h, m.weight(2), m.bias(2)));
  h = relu(dense(t, h, m.weight(3), m.bias(3)));
  return tanh(dense(t, h, m.weight(4), m.bias(4)));
}

inline NdArray manipulator_eval(ManipulatorModel& m, const NdArray& w) {
  Tape t;
  return manipulator_forward(t, m, t.constant(w)).payload();
}

// Factor values mapped affinely onto [-1, 1] per factor, the manipulator's
// input space.
inline NdArray normalized_factor_values(const LabeledDataset& ds) {
  const int nf = ds.grid.num_factors();
  NdArray w = NdArray::zeros({ds.n(), nf});
  for (int f = 0; f < nf; ++f) {
    const auto& vals = ds.grid.factors[static_cast<size_t>(f)].values;
    const double lo = vals.front(), hi = vals.back();
    for (int64_t i = 0; i < ds.n(); ++i)
      w.at(i, f) = 2.0 * (vals[static_cast<size_t>(ds.factor_at(i, f))] - lo) / (hi - lo) - 1.0;
  }
  return w;
}

// Reflection into [0,1]: x - 2 relu(x-1) + 2 relu(-x). Values above one
// reflect about one, below zero about zero.
inline double normalize_image(double x) {
  if (!(x >= -1.0 && x <= 2.0))
    throw ValidationError("normalize_image: value " + std::to_string(x) +
                          " outside [-1, 2]");
  return x - 2.0 * std::max(0.0, x - 1.0) + 2.0 * std::max(0.0, -x);
}

inline NdArray normalize_images(const NdArray& x) {
  NdArray out = x;
  for (double& v : out.data) v = normalize_image(v);
  return out;
}

inline Value normalize_images_on_tape(Tape& t, Value x) {
  Value ones = t.constant(NdArray::full(x.payload().shape, 1.0));
  Value above = relu(sub(x, ones));
  Value below = relu(scale(x, -1.0));
  return add(sub(x, scale(above, 2.0)), scale(below, 2.0));
}

// x' = normalize(x + u), u ~ U[-eps, eps] i.i.d. per pixel.
namespace detail {

inline void require_unit_range(const LabeledDataset& ds, const std::string& who) {
  for (double v : ds.images.data)
    if (!(v >= 0.0 && v <= 1.0))
      throw ValidationError(who + ": dataset entries must lie in [0, 1], found " +
                            std::to_string(v));
}

}  // namespace detail

inline LabeledDataset uniform_noise_modification(const LabeledDataset& ds, double eps,
                                                 uint64_t seed) {
  if (eps < 0.0 || eps >= 1.0)
    throw ValidationError("uniform_noise_modification: eps must be in [0, 1)");
  detail::require_unit_range(ds, "uniform_noise_modification");
  LabeledDataset out = ds;
  Rng rng(mix_seed(seed, 0x4e015eu));
  for (double& v : out.images.data) v = normalize_image(v + rng.uniform(-eps, eps));
  quantize_f32_inplace(out.images);
  out.provenance = "noise";
  out.seed = seed;
  out.validate();
  return out;
}

struct PipelineInputRun {
  VaeModel model;
  double mig = 0.0;
  int active_units = 0;
  uint64_t seed = 0;
};

struct ExtremeSelection {
  std::vector<size_t> disentangled;  // indices into the run list
  std::vector<size_t> entangled;
};

// Top and bottom `ensemble_size` runs by MIG; ties break toward the smaller
// seed. Runs with fewer active units than factors are overpruned and dropped.
inline ExtremeSelection select_extreme_runs(const std::vector<PipelineInputRun>& runs,
                                            int ensemble_size, int num_factors) {
  if (ensemble_size < 1)
    throw ValidationError("select_extreme_runs: ensemble_size must be >= 1");
  std::vector<size_t> eligible;
  for (size_t i = 0; i < runs.size(); ++i)
    if (runs[i].active_units >= num_factors) eligible.push_back(i);
  if (eligible.empty())
    throw ValidationError("select_extreme_runs: every run is overpruned");
  if (eligible.size() < 2)
    throw ValidationError("select_extreme_runs: needs at least two usable runs, got " +
                          std::to_string(eligible.size()));
  if (2 * static_cast<size_t>(ensemble_size) > eligible.size())
    throw ValidationError("select_extreme_runs: ensembles of " +
                          std::to_string(ensemble_size) + " overlap across " +
                          std::to_string(eligible.size()) + " usable runs");

  ExtremeSelection sel;
  std::vector<size_t> by_mig = eligible;
  std::sort(by_mig.begin(), by_mig.end(), [&](size_t a, size_t b) {
    if (runs[a].mig != runs[b].mig) return runs[a].mig > runs[b].mig;
    return runs[a].seed < runs[b].seed;
  });
  sel.disentangled.assign(by_mig.begin(), by_mig.begin() + ensemble_size);
  std::sort(by_mig.begin(), by_mig.end(), [&](size_t a, size_t b) {
    if (runs[a].mig != runs[b].mig) return runs[a].mig < runs[b].mig;
    return runs[a].seed < runs[b].seed;
  });
  sel.entangled.assign(by_mig.begin(), by_mig.begin() + ensemble_size);
  return sel;
}

struct ModificationConfig {
  double epsilon_max = 0.1;  // in (0, 1)
  int ensemble_size = 1;
  int decoder_batches_per_manip_batch = 3;
  int latent_samples_per_image = 5;
  int64_t steps = 1000;  // manipulator batches; decoders get 3x as many
  int64_t batch_size = 64;
  double lr = 1e-4;
  uint64_t seed = 0;

  // settings for the overload that trains its own candidate runs
  ModelConfig candidate_model;
  TrainHyper candidate_hyper;
  std::vector<uint64_t> candidate_seeds;
  int metric_bins = 20;

  void validate() const {
    if (!(epsilon_max > 0.0 && epsilon_max < 1.0))
      throw ValidationError("ModificationConfig: epsilon_max must be in (0, 1)");
    if (ensemble_size < 1)
      throw ValidationError("ModificationConfig: ensemble_size must be >= 1");
    if (decoder_batches_per_manip_batch < 1)
      throw ValidationError("ModificationConfig: decoder_batches_per_manip_batch must be >= 1");
    if (latent_samples_per_image < 1)
      throw ValidationError("ModificationConfig: latent_samples_per_image must be >= 1");
    if (steps < 1) throw ValidationError("ModificationConfig: steps must be >= 1");
    if (batch_size < 1) throw ValidationError("ModificationConfig: batch_size must be >= 1");
    if (!(lr > 0.0)) throw ValidationError("ModificationConfig: lr must be positive");
  }
};

// Interleaved training state: frozen encoders, decoder optimizers per model,
// one manipulator optimizer. Encoder parameters are never touched.
struct ManipulationSession {
  const LabeledDataset* ds = nullptr;
  ModificationConfig cfg;
  std::vector<VaeModel> ent, dis;
  std::vector<AdamState> ent_opt, dis_opt;
  ManipulatorModel manip;
  AdamState manip_opt;
  NdArray wnorm;  // [n, num_factors]
  Rng batch_rng{0}, noise_rng{0};
  double last_ent_loss = 0.0, last_dis_loss = 0.0;
  std::vector<double> manip_loss_curve;  // L_ent - L_dis per manipulator batch
  bool failed = false;
};

namespace detail {

inline NdArray gather_rows(const NdArray& x, const std::vector<int64_t>& rows) {
  NdArray out = NdArray::zeros({static_cast<int64_t>(rows.size()), x.shape[1]});
  for (size_t r = 0; r < rows.size(); ++r)
    for (int64_t c = 0; c < x.shape[1]; ++c) out.at(static_cast<int64_t>(r), c) = x.at(rows[r], c);
  return out;
}

inline std::vector<int64_t> sample_rows(Rng& rng, int64_t n, int64_t count) {
  std::vector<int64_t> rows(static_cast<size_t>(count));
  for (auto& r : rows) r = static_cast<int64_t>(rng.index(static_cast<size_t>(n)));
  return rows;
}

// posterior samples from the frozen encoder applied to original images
inline std::vector<NdArray> draw_latent_samples(VaeModel& m, const NdArray& x_batch,
                                                int samples, Rng& rng) {
  Representation r = eval_representation(m, x_batch);
  const int64_t b = x_batch.shape[0], k = m.config.latent_dim;
  std::vector<NdArray> zs;
  zs.reserve(static_cast<size_t>(samples));
  for (int s = 0; s < samples; ++s) {
    NdArray z = NdArray::zeros({b, k});
    for (int64_t i = 0; i < b; ++i)
      for (int64_t j = 0; j < k; ++j)
        z.at(i, j) = r.mu.at(i, j) + std::sqrt(r.sigma_sq.at(i, j)) * rng.normal();
    zs.push_back(std::move(z));
  }
  return zs;
}

}  // namespace detail

inline ManipulationSession make_manipulation_session(const LabeledDataset& ds,
                                                     std::vector<VaeModel> ent,
                                                     std::vector<VaeModel> dis,
                                                     const ModificationConfig& cfg) {
  cfg.validate();
  if (ent.empty() || dis.empty())
    throw ValidationError("make_manipulation_session: both ensembles must be non-empty");
  detail::require_unit_range(ds, "make_manipulation_session");
  ManipulationSession s;
  s.ds = &ds;
  s.cfg = cfg;
  s.ent = std::move(ent);
  s.dis = std::move(dis);
  for (auto* group : {&s.ent, &s.dis})
    for (VaeModel& m : *group) {
      if (m.config.input_dim != ds.dim())
        throw ValidationError("make_manipulation_session: model input_dim " +
                              std::to_string(m.config.input_dim) + " != dataset dim " +
                              std::to_string(ds.dim()));
      if (!m.config.variational)
        throw ValidationError("make_manipulation_session: models must be variational");
    }
  for (VaeModel& m : s.ent) s.ent_opt.emplace_back(m.decoder_params(), cfg.lr);
  for (VaeModel& m : s.dis) s.dis_opt.emplace_back(m.decoder_params(), cfg.lr);
  s.manip = make_manipulator(ds.grid.num_factors(), ds.dim(), mix_seed(cfg.seed, 0x3a11u));
  s.manip_opt = AdamState(s.manip.param_ptrs(), cfg.lr);
  s.wnorm = normalized_factor_values(ds);
  s.batch_rng = Rng(mix_seed(cfg.seed, 0xba7cau));
  s.noise_rng = Rng(mix_seed(cfg.seed, 0x015e5u));
  return s;
}

// Current x' for the given rows, no gradients.
inline NdArray session_modified_batch(ManipulationSession& s, const std::vector<int64_t>& rows) {
  const NdArray x = detail::gather_rows(s.ds->images, rows);
  const NdArray w = detail::gather_rows(s.wnorm, rows);
  NdArray mo = manipulator_eval(s.manip, w);
  NdArray xp = x;
  for (size_t i = 0; i < xp.data.size(); ++i)
    xp.data[i] = normalize_image(xp.data[i] + s.cfg.epsilon_max * mo.data[i]);
  return xp;
}

namespace detail {

// (1/S) sum_s mean_b ||dec(z_s) - target||^2 on the tape
inline Value stochastic_recon_loss(Tape& t, VaeModel& m, const std::vector<NdArray>& zs,
                                   Value target) {
  const double b = static_cast<double>(zs.front().shape[0]);
  Value acc;
  for (size_t s = 0; s < zs.size(); ++s) {
    Value dec = decode_on_tape(t, m, t.constant(zs[s]));
    Value l = scale(sum(square(sub(dec, target))), 1.0 / b);
    acc = s == 0 ? l : add(acc, l);
  }
  return scale(acc, 1.0 / static_cast<double>(zs.size()));
}

}  // namespace detail

// One decoder update per model: reconstruct the current x' from frozen-encoder
// latents of the original images.
inline void run_decoder_batch(ManipulationSession& s) {
  const auto rows = detail::sample_rows(s.batch_rng, s.ds->n(), s.cfg.batch_size);
  const NdArray x = detail::gather_rows(s.ds->images, rows);
  const NdArray xp = session_modified_batch(s, rows);

  for (auto pack : {std::make_pair(&s.ent, &s.ent_opt), std::make_pair(&s.dis, &s.dis_opt)})
    for (size_t i = 0; i < pack.first->size(); ++i) {
      VaeModel& m = (*pack.first)[i];
      const auto zs =
          detail::draw_latent_samples(m, x, s.cfg.latent_samples_per_image, s.noise_rng);
      Tape t;
      Value loss = detail::stochastic_recon_loss(t, m, zs, t.constant(xp));
      if (!std::isfinite(loss.payload().data[0])) {
        s.failed = true;
        return;
      }
      backward(loss);
      adam_step((*pack.second)[i], m.decoder_params());
    }
}

// One manipulator update: gradients flow through x' into the manipulator
// only; decoder gradients are discarded.
inline void run_manipulator_batch(ManipulationSession& s) {
  const auto rows = detail::sample_rows(s.batch_rng, s.ds->n(), s.cfg.batch_size);
  const NdArray x = detail::gather_rows(s.ds->images, rows);
  const NdArray w = detail::gather_rows(s.wnorm, rows);

  Tape t;
  Value mo = manipulator_forward(t, s.manip, t.constant(w));
  Value xp = normalize_images_on_tape(t, add(t.constant(x), scale(mo, s.cfg.epsilon_max)));

  auto ensemble_loss = [&](std::vector<VaeModel>& models) {
    Value acc;
    for (size_t i = 0; i < models.size(); ++i) {
      const auto zs = detail::draw_latent_samples(models[i], x,
                                                  s.cfg.latent_samples_per_image, s.noise_rng);
      Value l = detail::stochastic_recon_loss(t, models[i], zs, xp);
      acc = i == 0 ? l : add(acc, l);
    }
    return scale(acc, 1.0 / static_cast<double>(models.size()));
  };
  Value l_ent = ensemble_loss(s.ent);
  Value l_dis = ensemble_loss(s.dis);
  Value l_m = sub(l_ent, l_dis);

  s.last_ent_loss = l_ent.payload().data[0];
  s.last_dis_loss = l_dis.payload().data[0];
  s.manip_loss_curve.push_back(l_m.payload().data[0]);
  if (!std::isfinite(s.last_ent_loss) || !std::isfinite(s.last_dis_loss)) {
    s.failed = true;
    return;
  }
  backward(l_m);
  adam_step(s.manip_opt, s.manip.param_ptrs());
  for (auto* group : {&s.ent, &s.dis})
    for (VaeModel& m : *group)
      for (Param* p : m.decoder_params()) p->zero_grad();
}

// The alternating schedule: decoder_batches_per_manip_batch decoder updates
// per manipulator update.
inline void run_manipulation_round(ManipulationSession& s) {
  for (int i = 0; i < s.cfg.decoder_batches_per_manip_batch && !s.failed; ++i)
    run_decoder_batch(s);
  if (!s.failed) run_manipulator_batch(s);
}

inline void train_manipulation(ManipulationSession& s) {
  for (int64_t step = 0; step < s.cfg.steps && !s.failed; ++step) run_manipulation_round(s);
}

struct PipelineReport {
  double final_ent_loss = 0.0;
  double final_dis_loss = 0.0;
  double max_perturbation = 0.0;  // L-inf of eps * m(w) over the dataset
  std::vector<uint64_t> disentangled_seeds, entangled_seeds;
  std::vector<double> manip_loss_curve;
  bool failed = false;
};

inline nlohmann::json pipeline_report_json(const PipelineReport& r) {
  return nlohmann::json{{"final_ent_loss", r.final_ent_loss},
                        {"final_dis_loss", r.final_dis_loss},
                        {"max_perturbation", r.max_perturbation},
                        {"disentangled_seeds", r.disentangled_seeds},
                        {"entangled_seeds", r.entangled_seeds},
                        {"failed", r.failed}};
}

// Full pipeline over pre-trained candidate runs: select extremes, train the
// manipulation, apply it to every image. Factor indices and the grid carry
// over untouched.
inline std::pair<LabeledDataset, PipelineReport> run_modification_pipeline(
    const LabeledDataset& ds, const std::vector<PipelineInputRun>& runs,
    const ModificationConfig& cfg) {
  cfg.validate();
  const ExtremeSelection sel =
      select_extreme_runs(runs, cfg.ensemble_size, ds.grid.num_factors());
  std::vector<VaeModel> ent, dis;
  PipelineReport rep;
  for (size_t i : sel.entangled) {
    ent.push_back(runs[i].model);
    rep.entangled_seeds.push_back(runs[i].seed);
  }
  for (size_t i : sel.disentangled) {
    dis.push_back(runs[i].model);
    rep.disentangled_seeds.push_back(runs[i].seed);
  }

  ManipulationSession session =
      make_manipulation_session(ds, std::move(ent), std::move(dis), cfg);
  train_manipulation(session);
  rep.failed = session.failed;
  rep.final_ent_loss = session.last_ent_loss;
  rep.final_dis_loss = session.last_dis_loss;
  rep.manip_loss_curve = session.manip_loss_curve;

  LabeledDataset out = ds;
  const NdArray mo = manipulator_eval(session.manip, session.wnorm);
  rep.max_perturbation = cfg.epsilon_max * max_abs(mo);
  for (size_t i = 0; i < out.images.data.size(); ++i)
    out.images.data[i] =
        normalize_image(out.images.data[i] + cfg.epsilon_max * mo.data[i]);
  quantize_f32_inplace(out.images);
  out.provenance = "modified";
  out.seed = cfg.seed;
  out.validate();
  return {std::move(out), std::move(rep)};
}

// Self-contained overload: trains one candidate beta-VAE per configured seed,
// scores each by MIG, then runs the pipeline on those candidates.
inline std::pair<LabeledDataset, PipelineReport> run_modification_pipeline(
    const LabeledDataset& ds, const ModificationConfig& cfg) {
  cfg.validate();
  if (cfg.candidate_seeds.size() < 2)
    throw ValidationError("run_modification_pipeline: needs at least two candidate seeds");
  ModelConfig mc = cfg.candidate_model;
  if (mc.input_dim == 0) mc.input_dim = ds.dim();
  if (!mc.variational)
    throw ValidationError("run_modification_pipeline: candidates must be variational");

  std::vector<PipelineInputRun> runs;
  for (uint64_t seed : cfg.candidate_seeds) {
    VaeModel model = make_vae_model(mc, seed);
    TrainHyper h = cfg.candidate_hyper;
    h.seed = mix_seed(seed, 0xca4du);
    TrainedRun run = train_model(model, ds, h);
    if (run.failed) continue;
    RepresentationTable table = make_representation_table(run.rep, ds);
    PipelineInputRun pr;
    pr.model = std::move(run.model);
    pr.mig = mig_score(table, cfg.metric_bins);
    pr.active_units = count_active_units(run.rep.sigma_sq);
    pr.seed = seed;
    runs.push_back(std::move(pr));
  }
  return run_modification_pipeline(ds, runs, cfg);
}

}  // namespace dlab

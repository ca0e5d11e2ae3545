#include "robustlat/toytok.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>

#include "robustlat/binary_io.hpp"
#include "robustlat/error.hpp"
#include "robustlat/rng.hpp"

namespace robustlat {

namespace {

constexpr std::uint64_t kInitStream = 0x494E4954ull;     // "INIT"
constexpr std::uint64_t kCodeInitStream = 0x43494E49ull; // "CINI"
constexpr std::uint64_t kShuffleStream = 0x53485546ull;  // "SHUF"
constexpr std::uint64_t kReseedStream = 0x52534544ull;   // "RSED"

Eigen::MatrixXd activate(const Eigen::MatrixXd& pre, Activation act) {
  if (act == Activation::identity) return pre;
  return pre.array().tanh().matrix();
}

// Derivative of the activation, expressed through its output where possible.
Eigen::MatrixXd activation_grad(const Eigen::MatrixXd& post, Activation act) {
  if (act == Activation::identity) return Eigen::MatrixXd::Ones(post.rows(), post.cols());
  return (1.0 - post.array().square()).matrix();
}

RowMatrix gaussian(Eigen::Index rows, Eigen::Index cols, double stddev, Philox& rng) {
  RowMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

Eigen::MatrixXd gather_codewords(const Codebook& cb, std::span<const std::uint32_t> indices) {
  const auto d = static_cast<Eigen::Index>(cb.dim());
  Eigen::MatrixXd out(d, static_cast<Eigen::Index>(indices.size()));
  for (std::size_t j = 0; j < indices.size(); ++j) {
    if (indices[j] >= cb.num_codes()) throw InputError("token index out of range before decode");
    const auto row = cb.row(indices[j]);
    for (Eigen::Index r = 0; r < d; ++r) out(r, static_cast<Eigen::Index>(j)) = row[static_cast<std::size_t>(r)];
  }
  return out;
}

void check_arch_field(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument("toy tokenizer: " + msg);
}

}  // namespace

void ToyArch::validate() const {
  check_arch_field(image_side > 0 && patch > 0, "image side and patch must be positive");
  check_arch_field(image_side % patch == 0, "image side must be divisible by the patch size");
  check_arch_field(channels > 0, "channels must be positive");
  check_arch_field(latent_dim > 0 && hidden > 0, "latent_dim and hidden must be positive");
  check_arch_field(codebook_size >= 2, "codebook_size must be >= 2");
}

ToyTokenizer::ToyTokenizer(ToyArch arch, ToyWeights weights, Codebook codebook)
    : arch_(arch), weights_(std::move(weights)), codebook_(std::move(codebook)) {
  arch_.validate();
  const Eigen::Index pd = arch_.patch_dim(), h = arch_.hidden, d = arch_.latent_dim;
  const auto& w = weights_;
  const bool shapes_ok = w.enc_w1.rows() == h && w.enc_w1.cols() == pd && w.enc_b1.size() == h &&
                         w.enc_w2.rows() == d && w.enc_w2.cols() == h && w.enc_b2.size() == d &&
                         w.dec_w1.rows() == h && w.dec_w1.cols() == d && w.dec_b1.size() == h &&
                         w.dec_w2.rows() == pd && w.dec_w2.cols() == h && w.dec_b2.size() == pd;
  check_arch_field(shapes_ok, "weight shapes do not match the architecture");
  check_arch_field(codebook_.num_codes() == static_cast<std::size_t>(arch_.codebook_size) &&
                       codebook_.dim() == static_cast<std::size_t>(arch_.latent_dim),
                   "codebook shape does not match the architecture");
  check_arch_field(all_finite(), "non-finite weights");
}

ToyTokenizer ToyTokenizer::random_init(const ToyArch& arch, std::uint64_t seed) {
  arch.validate();
  Philox rng(seed, {kInitStream});
  const Eigen::Index pd = arch.patch_dim(), h = arch.hidden, d = arch.latent_dim;
  ToyWeights w;
  w.enc_w1 = gaussian(h, pd, 1.0 / std::sqrt(static_cast<double>(pd)), rng);
  w.enc_b1 = Eigen::VectorXd::Zero(h);
  w.enc_w2 = gaussian(d, h, 1.0 / std::sqrt(static_cast<double>(h)), rng);
  w.enc_b2 = Eigen::VectorXd::Zero(d);
  w.dec_w1 = gaussian(h, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  w.dec_b1 = Eigen::VectorXd::Zero(h);
  w.dec_w2 = gaussian(pd, h, 1.0 / std::sqrt(static_cast<double>(h)), rng);
  w.dec_b2 = Eigen::VectorXd::Zero(pd);
  std::vector<double> cb(static_cast<std::size_t>(arch.codebook_size) * arch.latent_dim);
  for (double& v : cb) v = 0.1 * rng.normal();
  ToyTokenizer tok(arch, std::move(w), Codebook(arch.codebook_size, arch.latent_dim, std::move(cb)));
  tok.round_to_float();
  return tok;
}

Eigen::MatrixXd ToyTokenizer::image_patches(const Image& image) const {
  if (image.shape != arch_.image_shape() || image.pixels.size() != image.shape.size())
    throw std::invalid_argument("image shape does not match the tokenizer");
  const int p = arch_.patch, g = arch_.grid_side(), c_total = arch_.channels;
  Eigen::MatrixXd x(arch_.patch_dim(), g * g);
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx)
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx)
          for (int c = 0; c < c_total; ++c)
            x((dy * p + dx) * c_total + c, gy * g + gx) = image.at(gy * p + dy, gx * p + dx, c);
  return x;
}

Image ToyTokenizer::patches_to_image(const Eigen::MatrixXd& patches) const {
  const int p = arch_.patch, g = arch_.grid_side(), c_total = arch_.channels;
  if (patches.rows() != arch_.patch_dim() || patches.cols() != g * g)
    throw std::invalid_argument("patch matrix shape does not match the tokenizer");
  Image out(arch_.image_shape());
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx)
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx)
          for (int c = 0; c < c_total; ++c)
            out.at(gy * p + dy, gx * p + dx, c) = static_cast<float>(patches((dy * p + dx) * c_total + c, gy * g + gx));
  return out;
}

Eigen::MatrixXd ToyTokenizer::encode_patches(const Eigen::MatrixXd& x) const {
  const Eigen::MatrixXd pre = (weights_.enc_w1 * x).colwise() + weights_.enc_b1;
  return (weights_.enc_w2 * activate(pre, arch_.encoder_activation)).colwise() + weights_.enc_b2;
}

Eigen::MatrixXd ToyTokenizer::decode_latents(const Eigen::MatrixXd& q) const {
  if (q.rows() != arch_.latent_dim) throw std::invalid_argument("latent dimension does not match the tokenizer");
  const Eigen::MatrixXd pre = (weights_.dec_w1 * q).colwise() + weights_.dec_b1;
  return (weights_.dec_w2 * activate(pre, arch_.decoder_activation)).colwise() + weights_.dec_b2;
}

LatentGrid ToyTokenizer::encode(const Image& image) const {
  const Eigen::MatrixXd z = encode_patches(image_patches(image));
  const int g = arch_.grid_side();
  LatentGrid out(g, g, arch_.latent_dim);
  for (Eigen::Index j = 0; j < z.cols(); ++j)
    for (Eigen::Index r = 0; r < z.rows(); ++r) out.cell(static_cast<std::size_t>(j))[static_cast<std::size_t>(r)] = z(r, j);
  return out;
}

Image ToyTokenizer::decode(const LatentGrid& latent) const {
  const int g = arch_.grid_side();
  if (latent.height != g || latent.width != g || latent.dim != arch_.latent_dim)
    throw std::invalid_argument("latent grid shape does not match the tokenizer");
  const Eigen::Map<const Eigen::MatrixXd> q(latent.values.data(), latent.dim, static_cast<Eigen::Index>(latent.cells()));
  return patches_to_image(decode_latents(q));
}

void ToyTokenizer::round_to_float() {
  visit_tensors([](const char*, std::span<double> t) {
    for (double& v : t) v = static_cast<double>(static_cast<float>(v));
  });
}

bool ToyTokenizer::all_finite() const {
  bool ok = true;
  visit_tensors([&](const char*, std::span<const double> t) {
    for (double v : t) ok = ok && std::isfinite(v);
  });
  return ok;
}

bool operator==(const ToyTokenizer& a, const ToyTokenizer& b) {
  if (a.arch_.image_side != b.arch_.image_side || a.arch_.channels != b.arch_.channels ||
      a.arch_.patch != b.arch_.patch || a.arch_.latent_dim != b.arch_.latent_dim ||
      a.arch_.hidden != b.arch_.hidden || a.arch_.codebook_size != b.arch_.codebook_size ||
      a.arch_.encoder_activation != b.arch_.encoder_activation ||
      a.arch_.decoder_activation != b.arch_.decoder_activation)
    return false;
  std::vector<std::span<const double>> ta, tb;
  a.visit_tensors([&](const char*, std::span<const double> t) { ta.push_back(t); });
  b.visit_tensors([&](const char*, std::span<const double> t) { tb.push_back(t); });
  for (std::size_t i = 0; i < ta.size(); ++i)
    if (!std::equal(ta[i].begin(), ta[i].end(), tb[i].begin(), tb[i].end())) return false;
  return true;
}

void init_codebook_from_data(ToyTokenizer& tok, std::span<const Image> images, std::uint64_t seed) {
  if (images.empty()) throw std::invalid_argument("init_codebook_from_data: empty image set");
  const std::size_t cells = static_cast<std::size_t>(tok.arch().grid_side()) * tok.arch().grid_side();
  const std::size_t total = images.size() * cells;
  const std::size_t k_total = tok.codebook().num_codes();
  Philox rng(seed, {kCodeInitStream});
  std::vector<std::size_t> picks(k_total);
  if (total >= k_total) {
    sample_without_replacement(rng, total, k_total, picks);
  } else {
    for (auto& p : picks) p = static_cast<std::size_t>(rng.uniform_below(total));
  }
  const std::size_t d = tok.codebook().dim();
  auto data = tok.mutable_codebook().mutable_data();
  for (std::size_t k = 0; k < k_total; ++k) {
    const std::size_t img = picks[k] / cells, cell = picks[k] % cells;
    const Eigen::MatrixXd x = tok.image_patches(images[img]).col(static_cast<Eigen::Index>(cell));
    const Eigen::MatrixXd z = tok.encode_patches(x);
    for (std::size_t r = 0; r < d; ++r) data[k * d + r] = static_cast<float>(z(static_cast<Eigen::Index>(r), 0));
  }
}

VqLosses vq_losses(const LatentGrid& latent, const Codebook& cb) {
  VqLosses out;
  out.tokens = quantize(latent, cb);
  double sum = 0.0;
  for (std::size_t i = 0; i < latent.cells(); ++i) sum += squared_distance(latent.cell(i), cb.row(out.tokens.indices[i]));
  out.codebook_loss = sum / static_cast<double>(latent.cells());
  out.commitment_loss = out.codebook_loss;
  return out;
}

LatentGrid commitment_gradient(const LatentGrid& latent, const Codebook& cb) {
  const TokenGrid tokens = quantize(latent, cb);
  LatentGrid grad(latent.height, latent.width, latent.dim);
  const double scale = 2.0 / static_cast<double>(latent.cells());
  for (std::size_t i = 0; i < latent.cells(); ++i) {
    const auto e = cb.row(tokens.indices[i]);
    for (int r = 0; r < latent.dim; ++r) grad.cell(i)[r] = scale * (latent.cell(i)[r] - e[r]);
  }
  return grad;
}

std::vector<TokenGrid> BatchForward::clean_grids(const ToyArch& arch) const {
  std::vector<TokenGrid> grids;
  grids.reserve(images);
  const int g = arch.grid_side();
  for (std::size_t i = 0; i < images; ++i) {
    TokenGrid t(g, g, static_cast<std::uint32_t>(arch.codebook_size));
    std::copy_n(clean_indices.begin() + static_cast<std::ptrdiff_t>(i * cells_per_image), cells_per_image,
                t.indices.begin());
    grids.push_back(std::move(t));
  }
  return grids;
}

BatchForward forward_encode(const ToyTokenizer& tok, std::span<const Image> batch) {
  if (batch.empty()) throw std::invalid_argument("empty training batch");
  const ToyArch& arch = tok.arch();
  BatchForward f;
  f.images = batch.size();
  f.cells_per_image = static_cast<std::size_t>(arch.grid_side()) * arch.grid_side();
  const auto cells = static_cast<Eigen::Index>(f.cells_per_image);
  f.input.resize(arch.patch_dim(), static_cast<Eigen::Index>(f.images) * cells);
  for (std::size_t i = 0; i < batch.size(); ++i)
    f.input.middleCols(static_cast<Eigen::Index>(i) * cells, cells) = tok.image_patches(batch[i]);

  const ToyWeights& w = tok.weights();
  f.enc_pre = (w.enc_w1 * f.input).colwise() + w.enc_b1;
  f.enc_hidden = activate(f.enc_pre, arch.encoder_activation);
  f.latent = (w.enc_w2 * f.enc_hidden).colwise() + w.enc_b2;
  if (!f.latent.allFinite()) throw NumericalError("encoder produced non-finite latents");

  f.clean_indices.resize(static_cast<std::size_t>(f.latent.cols()));
  const Codebook& cb = tok.codebook();
  for (Eigen::Index j = 0; j < f.latent.cols(); ++j) {
    const std::span<const double> z(f.latent.col(j).data(), cb.dim());
    f.clean_indices[static_cast<std::size_t>(j)] = nearest_codeword(cb, z).first;
  }
  return f;
}

GradientResult backward(const ToyTokenizer& tok, const BatchForward& fwd,
                        std::span<const std::uint32_t> decoder_indices, const LossWeights& lw) {
  const ToyArch& arch = tok.arch();
  const ToyWeights& w = tok.weights();
  const Codebook& cb = tok.codebook();
  const Eigen::Index n = fwd.latent.cols();
  if (decoder_indices.size() != static_cast<std::size_t>(n))
    throw std::invalid_argument("decoder token count does not match the batch");

  // Forward value of the straight-through input z + sg(e_used - z) is e_used.
  const Eigen::MatrixXd q = gather_codewords(cb, decoder_indices);
  const Eigen::MatrixXd dec_hidden =
      activate((w.dec_w1 * q).colwise() + w.dec_b1, arch.decoder_activation);
  const Eigen::MatrixXd recon = (w.dec_w2 * dec_hidden).colwise() + w.dec_b2;
  const Eigen::MatrixXd diff = recon - fwd.input;
  const Eigen::MatrixXd vq_diff = fwd.latent - gather_codewords(cb, fwd.clean_indices);

  GradientResult out;
  LossBreakdown& loss = out.loss;
  const double pixels = static_cast<double>(diff.size());
  loss.reconstruction = diff.squaredNorm() / pixels;
  loss.codebook = vq_diff.squaredNorm() / static_cast<double>(n);
  loss.commitment = loss.codebook;
  loss.total = lw.lambda_rec * loss.reconstruction +
               lw.lambda_vq * (loss.codebook + lw.commitment_weight * loss.commitment);

  ToyWeights& g = out.grads.weights;
  const Eigen::MatrixXd d_recon = (2.0 * lw.lambda_rec / pixels) * diff;
  g.dec_w2 = d_recon * dec_hidden.transpose();
  g.dec_b2 = d_recon.rowwise().sum();
  const Eigen::MatrixXd d_dec_pre =
      ((w.dec_w2.transpose() * d_recon).array() * activation_grad(dec_hidden, arch.decoder_activation).array())
          .matrix();
  g.dec_w1 = d_dec_pre * q.transpose();
  g.dec_b1 = d_dec_pre.rowwise().sum();

  // Straight-through: the decoder-input gradient lands on z, plus the commitment pull.
  const Eigen::MatrixXd d_latent =
      w.dec_w1.transpose() * d_dec_pre + (2.0 * lw.lambda_vq * lw.commitment_weight / static_cast<double>(n)) * vq_diff;

  out.grads.codebook = RowMatrix::Zero(static_cast<Eigen::Index>(cb.num_codes()), static_cast<Eigen::Index>(cb.dim()));
  const double cb_scale = -2.0 * lw.lambda_vq / static_cast<double>(n);
  for (Eigen::Index j = 0; j < n; ++j)
    out.grads.codebook.row(fwd.clean_indices[static_cast<std::size_t>(j)]) += cb_scale * vq_diff.col(j).transpose();

  g.enc_w2 = d_latent * fwd.enc_hidden.transpose();
  g.enc_b2 = d_latent.rowwise().sum();
  const Eigen::MatrixXd d_enc_pre =
      ((w.enc_w2.transpose() * d_latent).array() * activation_grad(fwd.enc_hidden, arch.encoder_activation).array())
          .matrix();
  g.enc_w1 = d_enc_pre * fwd.input.transpose();
  g.enc_b1 = d_enc_pre.rowwise().sum();
  return out;
}

GradientResult loss_and_gradients(const ToyTokenizer& tok, std::span<const Image> batch, const LossWeights& weights,
                                  std::span<const TokenGrid> decoder_tokens) {
  const BatchForward fwd = forward_encode(tok, batch);
  if (decoder_tokens.empty()) return backward(tok, fwd, fwd.clean_indices, weights);
  if (decoder_tokens.size() != batch.size()) throw std::invalid_argument("one decoder token grid per image expected");
  std::vector<std::uint32_t> idx;
  idx.reserve(fwd.clean_indices.size());
  for (const TokenGrid& t : decoder_tokens) {
    if (t.cells() != fwd.cells_per_image) throw std::invalid_argument("decoder token grid has the wrong size");
    idx.insert(idx.end(), t.indices.begin(), t.indices.end());
  }
  return backward(tok, fwd, idx, weights);
}

void TrainConfig::validate() const {
  if (steps < 0) throw std::invalid_argument("train steps must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
  if (!(codebook_lr_scale >= 0.0)) throw std::invalid_argument("codebook_lr_scale must be >= 0");
  if (!(loss.lambda_rec >= 0.0 && loss.lambda_vq >= 0.0 && loss.commitment_weight >= 0.0))
    throw std::invalid_argument("loss weights must be >= 0");
  if (eval_every < 1) throw std::invalid_argument("eval_every must be positive");
  perturbation.validate();
}

StepMetrics train_step(std::span<const Image> batch, ToyTokenizer& params, const TrainConfig& config,
                       std::int64_t step, TrainState& state) {
  const std::size_t k_total = params.codebook().num_codes();
  if (state.last_used.size() != k_total) state.last_used.assign(k_total, 0);

  StepMetrics m;
  const BatchForward fwd = forward_encode(params, batch);
  m.live = anneal_at(config.perturbation, step);

  std::vector<std::uint32_t> decoder_indices = fwd.clean_indices;
  if (m.live.alpha > 0.0 && m.live.beta > 0.0) {
    if (static_cast<std::size_t>(m.live.delta) >= k_total)
      throw std::invalid_argument("training perturbation delta " + std::to_string(m.live.delta) +
                                  " must be below the codebook size");
    const NeighborTable nt = build_neighbor_table(params.codebook(), static_cast<std::size_t>(m.live.delta));
    const PerturbedBatch pb = perturb_batch(fwd.clean_grids(params.arch()), m.live, nt, static_cast<std::uint64_t>(step));
    for (std::size_t i = 0; i < pb.tokens.size(); ++i)
      std::copy(pb.tokens[i].indices.begin(), pb.tokens[i].indices.end(),
                decoder_indices.begin() + static_cast<std::ptrdiff_t>(i * fwd.cells_per_image));
    m.images_perturbed = pb.report.images_perturbed;
    m.tokens_replaced = pb.report.tokens_replaced;
  }

  GradientResult gr = backward(params, fwd, decoder_indices, config.loss);
  m.loss = gr.loss;
  if (!std::isfinite(gr.loss.total)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << step << " (reconstruction=" << gr.loss.reconstruction
        << ", codebook=" << gr.loss.codebook << ", learning_rate=" << config.learning_rate
        << "); lower the learning rate";
    throw NumericalError(msg.str());
  }

  std::vector<std::span<double>> grads;
  visit_gradients(gr.grads, [&](const char*, std::span<double> t) { grads.push_back(t); });
  std::size_t tensor = 0;
  params.visit_tensors([&](const char* name, std::span<double> t) {
    const double lr = config.learning_rate * (std::string_view(name) == "codebook" ? config.codebook_lr_scale : 1.0);
    const std::span<double> g = grads[tensor++];
    for (std::size_t i = 0; i < t.size(); ++i) t[i] -= lr * g[i];
  });

  for (std::uint32_t k : fwd.clean_indices) state.last_used[k] = step;
  if (config.dead_code_steps > 0) {
    auto data = params.mutable_codebook().mutable_data();
    const std::size_t d = params.codebook().dim();
    for (std::size_t k = 0; k < k_total; ++k) {
      if (step - state.last_used[k] < config.dead_code_steps) continue;
      Philox rng(config.seed, {kReseedStream, static_cast<std::uint64_t>(step), k});
      const auto col = static_cast<Eigen::Index>(rng.uniform_below(static_cast<std::uint64_t>(fwd.latent.cols())));
      for (std::size_t r = 0; r < d; ++r) data[k * d + r] = fwd.latent(static_cast<Eigen::Index>(r), col);
      state.last_used[k] = step;
      ++m.codewords_reseeded;
    }
  }
  params.round_to_float();
  if (!params.all_finite()) throw NumericalError("non-finite parameters after step " + std::to_string(step));
  state.step = step + 1;
  return m;
}

std::vector<std::size_t> batch_indices(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed,
                                       std::int64_t step) {
  if (dataset_size == 0) throw std::invalid_argument("empty dataset");
  std::vector<std::size_t> out(batch_size);
  std::uint64_t cached_epoch = ~0ull;
  std::vector<std::size_t> perm(dataset_size);
  for (std::size_t i = 0; i < batch_size; ++i) {
    const std::uint64_t global = static_cast<std::uint64_t>(step) * batch_size + i;
    const std::uint64_t epoch = global / dataset_size;
    if (epoch != cached_epoch) {
      Philox rng(seed, {kShuffleStream, epoch});
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      for (std::size_t j = dataset_size; j > 1; --j) std::swap(perm[j - 1], perm[rng.uniform_below(j)]);
      cached_epoch = epoch;
    }
    out[i] = perm[global % dataset_size];
  }
  return out;
}

std::vector<std::size_t> token_usage(const Tokenizer& tok, std::span<const Image> images) {
  std::vector<std::size_t> counts(tok.codebook().num_codes(), 0);
  for (const Image& im : images)
    for (std::uint32_t k : tok.tokenize(im).indices) ++counts[k];
  return counts;
}

TrainResult train(std::span<const Image> dataset, ToyTokenizer params_init, const TrainConfig& config,
                  TrainState state, const StepCallback& on_step) {
  config.validate();
  if (dataset.empty()) throw std::invalid_argument("training dataset is empty");
  if (common_shape(dataset) != params_init.arch().image_shape())
    throw std::invalid_argument("dataset image shape does not match the tokenizer");
  const auto start = std::chrono::steady_clock::now();

  TrainResult result{std::move(params_init), std::move(state), {}};
  TrainReport& report = result.report;
  const std::size_t k_total = result.params.codebook().num_codes();
  if (result.state.last_used.size() != k_total) result.state.last_used.assign(k_total, 0);

  std::vector<Image> batch;
  CurvePoint window;
  std::int64_t window_len = 0;
  for (std::int64_t step = result.state.step; step < config.steps; ++step) {
    batch.clear();
    for (std::size_t idx : batch_indices(dataset.size(), config.batch_size, config.seed, step))
      batch.push_back(dataset[idx]);
    const StepMetrics m = train_step(batch, result.params, config, step, result.state);
    if (on_step) on_step(step, m);

    report.images_perturbed += m.images_perturbed;
    report.tokens_replaced += m.tokens_replaced;
    report.codewords_reseeded += m.codewords_reseeded;
    const std::size_t epoch = static_cast<std::size_t>(step) * config.batch_size / dataset.size();
    if (report.perturbed_tokens_per_epoch.size() <= epoch) report.perturbed_tokens_per_epoch.resize(epoch + 1, 0);
    report.perturbed_tokens_per_epoch[epoch] += m.tokens_replaced;

    window.reconstruction += m.loss.reconstruction;
    window.vq += m.loss.codebook + config.loss.commitment_weight * m.loss.commitment;
    window.total += m.loss.total;
    ++window_len;
    if ((step + 1) % config.eval_every == 0) {
      const double inv = 1.0 / static_cast<double>(window_len);
      report.curve.push_back({step, window.reconstruction * inv, window.vq * inv, window.total * inv});
      window = {};
      window_len = 0;
    }
  }
  report.usage_counts = token_usage(result.params, dataset);
  report.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

void save_checkpoint(const std::filesystem::path& path, const ToyTokenizer& params, const TrainState& state) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw InputError("cannot open " + path.string() + " for writing");
  const ToyArch& a = params.arch();
  binio::write_magic(os, "RTCK");
  binio::write_u32(os, kCheckpointFormatVersion);
  for (int v : {a.image_side, a.channels, a.patch, a.latent_dim, a.hidden, a.codebook_size})
    binio::write_u32(os, static_cast<std::uint32_t>(v));
  binio::write_u32(os, static_cast<std::uint32_t>(a.encoder_activation));
  binio::write_u32(os, static_cast<std::uint32_t>(a.decoder_activation));
  params.visit_tensors([&](const char*, std::span<const double> t) {
    for (double v : t) binio::write_f32(os, static_cast<float>(v));
  });
  binio::write_u64(os, static_cast<std::uint64_t>(state.step));
  binio::write_u32(os, static_cast<std::uint32_t>(state.last_used.size()));
  for (std::int64_t v : state.last_used) binio::write_u64(os, static_cast<std::uint64_t>(v));
  if (!os) throw InputError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string what = path.string();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open checkpoint " + what);
  binio::expect_magic(is, "RTCK", what);
  const std::uint32_t version = binio::read_u32(is, what);
  if (version != kCheckpointFormatVersion)
    throw InputError(what + ": unsupported checkpoint version " + std::to_string(version));
  ToyArch a;
  for (int* field : {&a.image_side, &a.channels, &a.patch, &a.latent_dim, &a.hidden, &a.codebook_size})
    *field = static_cast<int>(binio::read_u32(is, what));
  const std::uint32_t enc_act = binio::read_u32(is, what);
  const std::uint32_t dec_act = binio::read_u32(is, what);
  if (enc_act > 1 || dec_act > 1) throw InputError(what + ": unknown activation code");
  a.encoder_activation = static_cast<Activation>(enc_act);
  a.decoder_activation = static_cast<Activation>(dec_act);
  try {
    a.validate();
  } catch (const std::invalid_argument& e) {
    throw InputError(what + ": " + e.what());
  }
  ToyTokenizer tok = ToyTokenizer::random_init(a, 0);
  tok.visit_tensors([&](const char*, std::span<double> t) {
    for (double& v : t) v = binio::read_f32(is, what);
  });
  if (!tok.all_finite()) throw InputError(what + ": non-finite weights");
  TrainState state;
  state.step = static_cast<std::int64_t>(binio::read_u64(is, what));
  const std::uint32_t k = binio::read_u32(is, what);
  if (k != 0 && k != static_cast<std::uint32_t>(a.codebook_size)) throw InputError(what + ": corrupt trainer state");
  state.last_used.resize(k);
  for (auto& v : state.last_used) v = static_cast<std::int64_t>(binio::read_u64(is, what));
  return {std::move(tok), std::move(state)};
}

void to_json(Json& j, const ToyArch& a) {
  auto act = [](Activation x) { return x == Activation::tanh ? "tanh" : "identity"; };
  j = Json{{"image_side", a.image_side},
           {"channels", a.channels},
           {"patch", a.patch},
           {"latent_dim", a.latent_dim},
           {"hidden", a.hidden},
           {"codebook_size", a.codebook_size},
           {"encoder_activation", act(a.encoder_activation)},
           {"decoder_activation", act(a.decoder_activation)}};
}

void from_json(const Json& j, ToyArch& a) {
  const std::string ctx = "tokenizer";
  require_known_keys(j,
                     {"image_side", "channels", "patch", "latent_dim", "hidden", "codebook_size",
                      "encoder_activation", "decoder_activation"},
                     ctx);
  auto act = [&](const char* key, Activation fallback) {
    const auto name = get_or<std::string>(j, key, fallback == Activation::tanh ? "tanh" : "identity", ctx);
    if (name == "tanh") return Activation::tanh;
    if (name == "identity") return Activation::identity;
    throw ConfigError(ctx + "." + key + ": unknown activation \"" + name + "\"");
  };
  a.image_side = get_or<int>(j, "image_side", a.image_side, ctx);
  a.channels = get_or<int>(j, "channels", a.channels, ctx);
  a.patch = get_or<int>(j, "patch", a.patch, ctx);
  a.latent_dim = get_or<int>(j, "latent_dim", a.latent_dim, ctx);
  a.hidden = get_or<int>(j, "hidden", a.hidden, ctx);
  a.codebook_size = get_or<int>(j, "codebook_size", a.codebook_size, ctx);
  a.encoder_activation = act("encoder_activation", a.encoder_activation);
  a.decoder_activation = act("decoder_activation", a.decoder_activation);
  try {
    a.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(ctx + ": " + e.what());
  }
}

void to_json(Json& j, const TrainReport& r) {
  auto num = [](double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); };
  Json curve = Json::array();
  for (const CurvePoint& p : r.curve)
    curve.push_back({{"step", p.step}, {"reconstruction", p.reconstruction}, {"vq", p.vq}, {"total", p.total}});
  j = Json{{"curve", curve},
           {"usage_counts", r.usage_counts},
           {"perturbed_tokens_per_epoch", r.perturbed_tokens_per_epoch},
           {"images_perturbed", r.images_perturbed},
           {"tokens_replaced", r.tokens_replaced},
           {"codewords_reseeded", r.codewords_reseeded},
           {"final_rfid", num(r.final_rfid)},
           {"final_pfid", num(r.final_pfid)}};
}

}  // namespace robustlat

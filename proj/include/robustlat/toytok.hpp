#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

#include "robustlat/codebook.hpp"
#include "robustlat/perturbation.hpp"
#include "robustlat/tokenizer.hpp"

namespace robustlat {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// `identity` exists so tests can make the per-patch maps linear.
enum class Activation : std::uint32_t { tanh = 0, identity = 1 };

struct ToyArch {
  int image_side = 32;
  int channels = 3;
  int patch = 4;
  int latent_dim = 8;
  int hidden = 64;
  int codebook_size = 256;
  Activation encoder_activation = Activation::tanh;
  Activation decoder_activation = Activation::tanh;

  int grid_side() const noexcept { return image_side / patch; }
  int patch_dim() const noexcept { return patch * patch * channels; }
  ImageShape image_shape() const noexcept { return {image_side, image_side, channels}; }
  void validate() const;
};

// Encoder: patch -> W1,b1 -> act -> W2,b2 -> latent (D).
// Decoder: latent -> W3,b3 -> act -> W4,b4 -> patch pixels.
struct ToyWeights {
  RowMatrix enc_w1, enc_w2, dec_w1, dec_w2;
  Eigen::VectorXd enc_b1, enc_b2, dec_b1, dec_b2;
};

struct ToyGradients {
  ToyWeights weights;
  RowMatrix codebook;  // K x D
};

class ToyTokenizer : public Tokenizer {
 public:
  ToyTokenizer(ToyArch arch, ToyWeights weights, Codebook codebook);

  // Gaussian weights with std 1/sqrt(fan_in), zero biases, small random codebook.
  static ToyTokenizer random_init(const ToyArch& arch, std::uint64_t seed);

  const ToyArch& arch() const noexcept { return arch_; }
  const ToyWeights& weights() const noexcept { return weights_; }
  ToyWeights& mutable_weights() noexcept { return weights_; }
  const Codebook& codebook() const override { return codebook_; }
  Codebook& mutable_codebook() noexcept { return codebook_; }

  ImageShape image_shape() const override { return arch_.image_shape(); }
  LatentGrid encode(const Image& image) const override;
  Image decode(const LatentGrid& latent) const override;

  // Column j is the flattened (dy, dx, c) patch of grid cell j (row-major cells).
  Eigen::MatrixXd image_patches(const Image& image) const;
  Image patches_to_image(const Eigen::MatrixXd& patches) const;
  Eigen::MatrixXd encode_patches(const Eigen::MatrixXd& patches) const;
  Eigen::MatrixXd decode_latents(const Eigen::MatrixXd& latents) const;

  // Visits every trainable tensor in checkpoint order as (name, data span).
  template <typename Fn>
  void visit_tensors(Fn&& fn) {
    visit_impl(*this, fn);
  }
  template <typename Fn>
  void visit_tensors(Fn&& fn) const {
    visit_impl(*this, fn);
  }

  // Rounds every parameter to the nearest float32 so checkpoints are lossless.
  void round_to_float();
  bool all_finite() const;

  friend bool operator==(const ToyTokenizer& a, const ToyTokenizer& b);

 private:
  template <typename Self, typename Fn>
  static void visit_impl(Self& self, Fn& fn) {
    auto span_of = [](auto& m) { return std::span(m.data(), static_cast<std::size_t>(m.size())); };
    fn("enc_w1", span_of(self.weights_.enc_w1));
    fn("enc_b1", span_of(self.weights_.enc_b1));
    fn("enc_w2", span_of(self.weights_.enc_w2));
    fn("enc_b2", span_of(self.weights_.enc_b2));
    fn("dec_w1", span_of(self.weights_.dec_w1));
    fn("dec_b1", span_of(self.weights_.dec_b1));
    fn("dec_w2", span_of(self.weights_.dec_w2));
    fn("dec_b2", span_of(self.weights_.dec_b2));
    if constexpr (std::is_const_v<Self>) {
      fn("codebook", self.codebook_.data());
    } else {
      fn("codebook", self.codebook_.mutable_data());
    }
  }

  ToyArch arch_;
  ToyWeights weights_;
  Codebook codebook_;
};

template <typename Fn>
void visit_gradients(ToyGradients& g, Fn&& fn) {
  auto span_of = [](auto& m) { return std::span<double>(m.data(), static_cast<std::size_t>(m.size())); };
  fn("enc_w1", span_of(g.weights.enc_w1));
  fn("enc_b1", span_of(g.weights.enc_b1));
  fn("enc_w2", span_of(g.weights.enc_w2));
  fn("enc_b2", span_of(g.weights.enc_b2));
  fn("dec_w1", span_of(g.weights.dec_w1));
  fn("dec_b1", span_of(g.weights.dec_b1));
  fn("dec_w2", span_of(g.weights.dec_w2));
  fn("dec_b2", span_of(g.weights.dec_b2));
  fn("codebook", span_of(g.codebook));
}

// Replaces codewords with encoder outputs of distinct randomly chosen patches.
void init_codebook_from_data(ToyTokenizer& tok, std::span<const Image> images, std::uint64_t seed);

struct VqLosses {
  double codebook_loss = 0.0;    // mean_cells ||sg(z) - e||^2
  double commitment_loss = 0.0;  // mean_cells ||z - sg(e)||^2 (same forward value)
  TokenGrid tokens;
};

VqLosses vq_losses(const LatentGrid& latent, const Codebook& cb);
// d(commitment_loss)/dz = 2 (z - e_k(z)) / cells.
LatentGrid commitment_gradient(const LatentGrid& latent, const Codebook& cb);

struct LossWeights {
  double lambda_rec = 1.0;
  double lambda_vq = 1.0;
  double commitment_weight = 0.25;
};

struct LossBreakdown {
  double reconstruction = 0.0;  // MSE over every pixel of the batch
  double codebook = 0.0;
  double commitment = 0.0;
  double total = 0.0;
};

// Encoder pass over a batch with the clean nearest-codeword assignment.
struct BatchForward {
  Eigen::MatrixXd input;   // patch_dim x N, N = batch * cells
  Eigen::MatrixXd enc_pre; // hidden x N
  Eigen::MatrixXd enc_hidden;
  Eigen::MatrixXd latent;  // D x N
  std::vector<std::uint32_t> clean_indices;
  std::size_t images = 0;
  std::size_t cells_per_image = 0;

  std::vector<TokenGrid> clean_grids(const ToyArch& arch) const;
};

BatchForward forward_encode(const ToyTokenizer& tok, std::span<const Image> batch);

struct GradientResult {
  ToyGradients grads;
  LossBreakdown loss;
};

// Decoder input is the codeword of `decoder_indices` (the possibly perturbed
// tokens) in the forward pass; its gradient reaches the encoder unchanged
// (straight-through). VQ terms always use the clean assignment.
GradientResult backward(const ToyTokenizer& tok, const BatchForward& fwd,
                        std::span<const std::uint32_t> decoder_indices, const LossWeights& weights);

GradientResult loss_and_gradients(const ToyTokenizer& tok, std::span<const Image> batch, const LossWeights& weights,
                                  std::span<const TokenGrid> decoder_tokens = {});

struct TrainConfig {
  std::int64_t steps = 2000;
  std::size_t batch_size = 16;
  double learning_rate = 0.05;
  double codebook_lr_scale = 1.0;
  LossWeights loss;
  AnnealSchedule perturbation;
  std::uint64_t seed = 0;
  std::int64_t eval_every = 50;
  std::int64_t dead_code_steps = 500;

  void validate() const;
};

// Mutable training state beyond the parameters; saved in checkpoints so a
// resumed run matches an uninterrupted one bit for bit.
struct TrainState {
  std::int64_t step = 0;
  std::vector<std::int64_t> last_used;  // per codeword, step of last clean assignment
};

struct StepMetrics {
  LossBreakdown loss;
  PerturbationSpec live;
  std::size_t images_perturbed = 0;
  std::size_t tokens_replaced = 0;
  std::size_t codewords_reseeded = 0;
};

StepMetrics train_step(std::span<const Image> batch, ToyTokenizer& params, const TrainConfig& config,
                       std::int64_t step, TrainState& state);

// Dataset positions for `step`: consecutive slices of per-epoch permutations.
std::vector<std::size_t> batch_indices(std::size_t dataset_size, std::size_t batch_size, std::uint64_t seed,
                                       std::int64_t step);

struct CurvePoint {
  std::int64_t step = 0;  // last step of the logged window
  double reconstruction = 0.0;
  double vq = 0.0;
  double total = 0.0;
};

struct TrainReport {
  std::vector<CurvePoint> curve;
  std::vector<std::size_t> usage_counts;
  std::vector<std::size_t> perturbed_tokens_per_epoch;
  std::size_t images_perturbed = 0;
  std::size_t tokens_replaced = 0;
  std::size_t codewords_reseeded = 0;
  double final_rfid = std::numeric_limits<double>::quiet_NaN();
  double final_pfid = std::numeric_limits<double>::quiet_NaN();
  double wall_clock_seconds = 0.0;
};

struct TrainResult {
  ToyTokenizer params;
  TrainState state;
  TrainReport report;
};

using StepCallback = std::function<void(std::int64_t step, const StepMetrics&)>;

// Runs steps [state.step, config.steps). A default state starts from scratch.
TrainResult train(std::span<const Image> dataset, ToyTokenizer params_init, const TrainConfig& config,
                  TrainState state = {}, const StepCallback& on_step = {});

std::vector<std::size_t> token_usage(const Tokenizer& tok, std::span<const Image> images);

void save_checkpoint(const std::filesystem::path& path, const ToyTokenizer& params, const TrainState& state);
struct Checkpoint {
  ToyTokenizer params;
  TrainState state;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

void to_json(Json& j, const ToyArch& a);
void from_json(const Json& j, ToyArch& a);
void to_json(Json& j, const TrainReport& r);

}  // namespace robustlat

#pragma once

#include <atomic>
#include <vector>

#include "robustlat/dataset.hpp"
#include "robustlat/toytok.hpp"

namespace fixture {

inline robustlat::SyntheticSpec small_spec(std::uint64_t seed = 1) {
  robustlat::SyntheticSpec s;
  s.side = 16;
  s.num_classes = 4;
  s.per_class = 8;
  s.seed = seed;
  return s;
}

inline std::vector<robustlat::Image> small_corpus(std::uint64_t seed = 1) {
  auto set = robustlat::generate(small_spec(seed));
  for (auto& im : set.images) im = robustlat::quantize_8bit(im);
  return set.images;
}

inline robustlat::ToyArch small_arch() {
  robustlat::ToyArch a;
  a.image_side = 16;
  a.patch = 4;
  a.latent_dim = 4;
  a.hidden = 16;
  a.codebook_size = 32;
  return a;
}

inline robustlat::TrainConfig quick_train(std::int64_t steps, std::uint64_t seed = 3) {
  robustlat::TrainConfig c;
  c.steps = steps;
  c.batch_size = 8;
  c.learning_rate = 0.05;
  c.seed = seed;
  c.eval_every = 10;
  c.perturbation.initial = {0.0, 0.0, 1, seed};
  c.perturbation.total_steps = std::max<std::int64_t>(1, steps);
  return c;
}

inline robustlat::ToyTokenizer trained_small(std::int64_t steps = 150, std::uint64_t seed = 3) {
  const auto images = small_corpus();
  robustlat::ToyTokenizer tok = robustlat::ToyTokenizer::random_init(small_arch(), seed);
  robustlat::init_codebook_from_data(tok, images, seed);
  return robustlat::train(images, tok, quick_train(steps, seed)).params;
}

// Grayscale tokenizer with one pixel per token and a 256-level codebook:
// decode(encode(x)) == x for 8-bit images.
class IdentityTokenizer : public robustlat::Tokenizer {
 public:
  explicit IdentityTokenizer(int side) : side_(side), cb_(make_codebook()) {}
  robustlat::ImageShape image_shape() const override { return {side_, side_, 1}; }
  const robustlat::Codebook& codebook() const override { return cb_; }
  robustlat::LatentGrid encode(const robustlat::Image& im) const override {
    robustlat::LatentGrid g(side_, side_, 1);
    for (std::size_t i = 0; i < im.pixels.size(); ++i) g.values[i] = std::round(im.pixels[i] * 255.0) / 255.0;
    return g;
  }
  robustlat::Image decode(const robustlat::LatentGrid& g) const override {
    ++decodes;
    robustlat::Image im(image_shape());
    for (std::size_t i = 0; i < im.pixels.size(); ++i) im.pixels[i] = static_cast<float>(g.values[i]);
    return im;
  }
  mutable std::atomic<int> decodes{0};

 private:
  static robustlat::Codebook make_codebook() {
    std::vector<double> v(256);
    for (int k = 0; k < 256; ++k) v[k] = k / 255.0;
    return robustlat::Codebook(256, 1, v);
  }
  int side_;
  robustlat::Codebook cb_;
};

}  // namespace fixture

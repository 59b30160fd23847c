#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "segprompt/segprompt.hpp"

using namespace segprompt;
using segprompt::testing::random_tensor;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

ViTConfig tiny(std::size_t layers = 2) {
  ViTConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.embed_dim = 8;
  c.num_layers = layers;
  c.num_heads = 2;
  return c;
}

}  // namespace

TEST(ViTConfig, TokenCounts) {
  ViTConfig desk;
  EXPECT_EQ(desk.n_img(), 16u);
  EXPECT_EQ(ViTConfig::vit_b16().n_img(), 196u);
}

TEST(ViTConfig, RejectsIndivisibleGeometry) {
  ViTConfig c;
  c.image_size = 30;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ViTConfig{};
  c.num_heads = 5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ViTConfig, TextRoundTrip) {
  const auto c = ViTConfig::vit_b16();
  EXPECT_EQ(ViTConfig::from_text(c.to_text()), c);
}

TEST(Patchify, DeskImageGivesSixteenTokens) {
  Rng rng(0);
  ViTConfig c;
  c.embed_dim = 16;
  ViTBackbone vit(c, rng);
  NoGradGuard g;
  EXPECT_EQ(vit.patchify(Tensor::zeros({3, 32, 32})).shape(), (Shape{16, 16}));
}

TEST(Patchify, ViTB16GeometryGives196Tokens) {
  // Only the patch extraction is exercised at full width; a ViT-B/16 model
  // would be needlessly slow to construct here.
  NoGradGuard g;
  EXPECT_EQ(patches(Tensor::zeros({3, 224, 224}), 16).shape(), (Shape{196, 768}));
}

TEST(Patchify, ZeroImageZeroBiasGivesPositionEmbeddings) {
  Rng rng(1);
  ViTBackbone vit(tiny(), rng);
  Tensor b = vit.patch_embed.bias;
  std::fill(b.mutable_data().begin(), b.mutable_data().end(), 0.0);
  NoGradGuard g;
  const auto tok = values(vit.patchify(Tensor::zeros({3, 16, 16})));
  const auto pos = values(vit.pos_embed);
  for (std::size_t i = 0; i < tok.size(); ++i) EXPECT_EQ(tok[i], pos[8 + i]);  // rows 1.. of pos_embed
}

TEST(Patchify, WrongImageSize) {
  Rng rng(2);
  ViTBackbone vit(tiny(), rng);
  NoGradGuard g;
  EXPECT_THROW(vit.patchify(Tensor::zeros({3, 32, 32})), DimensionError);
}

TEST(Encode, NoLayersIsFinalNorm) {
  Rng rng(3);
  ViTBackbone vit(tiny(0), rng);
  auto x = random_tensor({5, 8}, rng, false);
  NoGradGuard g;
  EXPECT_EQ(values(vit.encode(x)), values(vit.final_norm.forward(x)));
}

TEST(Encode, PreservesLength) {
  Rng rng(4);
  ViTConfig c = tiny(1);
  ViTBackbone vit(c, rng);
  NoGradGuard g;
  for (std::size_t n : {197u, 248u}) EXPECT_EQ(vit.encode(Tensor::zeros({n, 8})).dim(0), n);
}

TEST(Encode, PermutationEquivariant) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    ViTBackbone vit(tiny(), rng);
    auto x = random_tensor({6, 8}, rng, false);
    auto xv = values(x);
    auto swapped = xv;
    std::swap_ranges(swapped.begin() + 2 * 8, swapped.begin() + 3 * 8, swapped.begin() + 4 * 8);
    NoGradGuard g;
    const auto a = values(vit.encode(x));
    const auto b = values(vit.encode(Tensor({6, 8}, swapped)));
    for (std::size_t r = 0; r < 6; ++r) {
      const std::size_t src = r == 2 ? 4 : (r == 4 ? 2 : r);
      for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(b[r * 8 + c], a[src * 8 + c], 1e-12);
    }
  }
}

TEST(Encode, DimensionMismatch) {
  Rng rng(5);
  ViTBackbone vit(tiny(), rng);
  NoGradGuard g;
  EXPECT_THROW(vit.encode(Tensor::zeros({3, 7})), DimensionError);
}

TEST(Encode, DeterministicAndFiniteOnBoundedInput) {
  Rng rng(6);
  ViTBackbone vit(tiny(), rng);
  auto x = scale(random_tensor({9, 8}, rng, false), 5.0);  // |x| <= 10
  NoGradGuard g;
  const auto a = values(vit.encode(x));
  EXPECT_EQ(a, values(vit.encode(x)));
  for (double v : a) EXPECT_TRUE(std::isfinite(v));
}

TEST(LayerPrompts, SingleLayerEqualsAppendedPrompts) {
  Rng rng(7);
  ViTBackbone vit(tiny(1), rng);
  auto x = random_tensor({5, 8}, rng, false);
  auto p = random_tensor({3, 8}, rng, false);
  NoGradGuard g;
  EXPECT_EQ(values(vit.encode_with_layer_prompts(x, {p})), values(vit.encode(concat_rows({x, p}))));
}

TEST(LayerPrompts, NoPromptsEqualsEncode) {
  Rng rng(8);
  ViTBackbone vit(tiny(2), rng);
  auto x = random_tensor({5, 8}, rng, false);
  NoGradGuard g;
  EXPECT_EQ(values(vit.encode_with_layer_prompts(x, {Tensor{}, Tensor{}})), values(vit.encode(x)));
}

TEST(LayerPrompts, DeepDiffersFromShallow) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    ViTBackbone vit(tiny(3), rng);
    auto x = random_tensor({5, 8}, rng, false);
    std::vector<Tensor> banks;
    for (int i = 0; i < 3; ++i) banks.push_back(random_tensor({2, 8}, rng, false));
    NoGradGuard g;
    const auto deep = vit.encode_with_layer_prompts(x, banks);
    const auto shallow = vit.encode(concat_rows({x, banks[0]}));
    double diff = 0;
    for (std::size_t c = 0; c < 8; ++c) diff += std::abs(deep[c] - shallow[c]);
    EXPECT_GT(diff, 1e-6) << "seed " << seed;
  }
}

TEST(LayerPrompts, BankCountMustMatchLayers) {
  Rng rng(9);
  ViTBackbone vit(tiny(2), rng);
  NoGradGuard g;
  EXPECT_THROW(vit.encode_with_layer_prompts(Tensor::zeros({3, 8}), {Tensor{}}), DimensionError);
}

TEST(Backbone, FrozenParametersReceiveNoGradient) {
  Rng rng(10);
  ViTBackbone vit(tiny(), rng);
  vit.set_frozen(true);
  auto probe = random_tensor({1, 8}, rng, true);
  auto& tape = GradTape::current();
  tape.clear();
  auto seq = concat_rows({vit.cls_token(), vit.patchify(random_tensor({3, 16, 16}, rng, false)), probe});
  tape.backward(sum(vit.encode(seq)));
  tape.clear();
  EXPECT_TRUE(probe.has_grad());
  for (const auto& p : vit.parameters()) EXPECT_FALSE(p.tensor.has_grad()) << p.name;
}

TEST(Pretext, HeldOutAccuracyBeatsHalfOnThreeSeeds) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    GeneratorConfig g;
    g.seed = seed;
    g.com_videos = g.cap_videos = 10;
    g.frames_per_video = 30;
    PretextConfig pc;
    pc.seed = seed;
    const auto r = pretext_pretrain(pc, generate_pretext(g), {});
    EXPECT_GT(r.vit_accuracy, 0.5) << "seed " << seed;
    EXPECT_GT(r.resnet_accuracy, 0.25) << "seed " << seed;
  }
}

TEST(Pretext, ExportsFrozenTensorsAndRoundTrips) {
  GeneratorConfig g;
  g.frames_per_video = 5;
  PretextConfig pc;
  pc.epochs = 1;
  pc.model.vit = tiny();
  pc.model.vit.image_size = 32;
  const auto r = pretext_pretrain(pc, generate_pretext(g), {});
  for (const auto& t : r.tensors) EXPECT_FALSE(t.tensor.requires_grad()) << t.name;

  const auto bytes = encode_checkpoint(r.tensors, r.config_text);
  const auto ck = decode_checkpoint(bytes);
  auto build = [&](const Checkpoint& c) {
    Rng rng(99);
    ViTBackbone vit(ViTConfig::from_text(c.config), rng);
    load_values(vit.parameters(), c.tensors, std::string(kVitPrefix));
    NoGradGuard ng;
    Rng in(5);
    return values(vit.encode(concat_rows({vit.cls_token(), vit.patchify(random_tensor({3, 32, 32}, in, false))})));
  };
  EXPECT_EQ(build(r.checkpoint()), build(ck));
  EXPECT_EQ(encode_checkpoint(ck.tensors, ck.config), bytes);
}

TEST(Pretext, OverlapWithEvaluationIsContractError) {
  GeneratorConfig g;
  g.frames_per_video = 5;
  const auto eval = generate(g);
  PretextConfig pc;
  pc.epochs = 1;
  EXPECT_THROW(pretext_pretrain(pc, eval, eval), ContractError);
  auto renamed = eval;
  for (auto& s : renamed) s.video_id = "other_" + s.video_id;
  EXPECT_THROW(check_pretext_disjoint(renamed, eval), ContractError);  // identical frames
}

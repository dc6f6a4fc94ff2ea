#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "gradcheck.hpp"
#include "phg2st/error.hpp"
#include "phg2st/model.hpp"

using namespace phg2st;
using phg2st::testing::gradcheck;
using phg2st::testing::random_matrix;

namespace {

SlideBundle lattice_bundle(Index rows, Index cols, Index d, Index m, std::uint64_t seed) {
  Rng rng(seed);
  SlideBundle b;
  b.slide_id = "t";
  b.patient_id = "p";
  const Index n = rows * cols;
  b.coords.resize(n, 2);
  b.grid.resize(n, 2);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) {
      const Index i = r * cols + c;
      b.spot_ids.push_back("s" + std::to_string(i));
      b.grid(i, 0) = r;
      b.grid(i, 1) = c;
      b.coords(i, 0) = 224.0 * static_cast<double>(c);
      b.coords(i, 1) = 224.0 * static_cast<double>(r);
    }
  b.spot_features = random_matrix(n, d, rng);
  b.counts = CountMatrix::Ones(n, m);
  for (Index g = 0; g < m; ++g) b.gene_names.push_back("g" + std::to_string(g));
  return b;
}

PreparedSlide prepared(Index rows, Index cols, Index d, Index m, std::uint64_t seed, Index k = 4) {
  const SlideBundle b = lattice_bundle(rows, cols, d, m, seed);
  Rng rng(seed + 1000);
  ExpressionMatrix e;
  e.values = random_matrix(b.n(), m, rng, 0.0, 3.0);
  return prepare_slide(b, e, HypergraphOptions{.k = k});
}

ModelConfig tiny_config(Index d_in, Index m) {
  ModelConfig c;
  c.input_dim = d_in;
  c.genes = m;
  c.width = 4;
  c.prompt_width = 4;
  c.attn_width = 4;
  c.heads = 2;
  c.cross_heads = 2;
  c.blocks = 1;
  c.mlp_ratio = 2;
  c.dropout = 0.1;
  return c;
}

}  // namespace

TEST_CASE("mask_expression") {
  Rng rng(1);
  const Matrix y = random_matrix(10, 4, rng, 0.5, 2.0);

  const MaskedExpression all = mask_expression(y, 1.0, rng);
  CHECK(all.values == y);
  CHECK(all.kept_count() == 10);

  const MaskedExpression none = mask_expression(y, 0.0, rng);
  CHECK(none.values.isZero(0));
  CHECK(none.kept_count() == 0);

  const MaskedExpression some = mask_expression(y, 0.3, rng);
  CHECK(some.kept_count() == 3);
  for (Index i = 0; i < 10; ++i) {
    if (some.kept[static_cast<std::size_t>(i)])
      CHECK(some.values.row(i) == y.row(i));
    else
      CHECK(some.values.row(i).isZero(0));
  }

  for (Index n : {1, 7, 33, 100, 257})
    for (double r : {0.0, 0.1, 0.29, 0.3, 0.5, 0.77, 1.0}) {
      const Matrix yy = Matrix::Ones(n, 1);
      CHECK(mask_expression(yy, r, rng).kept_count() == static_cast<Index>(std::floor(r * static_cast<double>(n) + 1e-9)));
    }

  Rng a(5), b(5);
  CHECK(mask_expression(y, 0.5, a).kept == mask_expression(y, 0.5, b).kept);
  CHECK_THROWS_AS(mask_expression(y, 1.5, rng), ParameterError);

  // Every row is kept with probability ratio.
  std::vector<int> hits(10, 0);
  Rng sweep(9);
  for (int t = 0; t < 2000; ++t) {
    const auto mk = mask_expression(y, 0.3, sweep);
    for (std::size_t i = 0; i < 10; ++i) hits[i] += mk.kept[i];
  }
  for (int h : hits) CHECK(std::abs(h / 2000.0 - 0.3) < 0.05);
}

TEST_CASE("encode_prompt") {
  const ModelConfig cfg = tiny_config(3, 5);
  const ModelParams p = init_params(cfg, 3);
  Rng rng(1);
  const Tensor zeros = Tensor::zeros({6, 5});
  const Tensor out = encode_prompt(zeros, p.prompt, 0.0, false, rng);
  CHECK(out.rows() == 6);
  CHECK(out.cols() == cfg.prompt_width);
  CHECK(out.value().isZero(0));

  const Tensor y = Tensor::from_matrix(random_matrix(6, 5, rng));
  const Matrix manual =
      layer_norm(add_bias(matmul(gelu(add_bias(matmul(y, p.prompt.project.weight), p.prompt.project.bias)),
                                 p.prompt.fc.weight),
                          p.prompt.fc.bias),
                 p.prompt.norm.gain, p.prompt.norm.bias)
          .value();
  CHECK(encode_prompt(y, p.prompt, 0.5, false, rng).value() == manual);

  const Tensor w = Tensor::from_matrix(random_matrix(6, cfg.prompt_width, rng));
  CHECK(gradcheck({p.prompt.project.weight}, [&] {
          Rng r(4);
          return sum(mul(encode_prompt(y, p.prompt, 0.2, true, r), w));
        }) < 1e-4);
}

TEST_CASE("transformer_block") {
  const ModelConfig cfg = tiny_config(3, 5);
  ModelParams p = init_params(cfg, 17);
  TransformerBlockParams& blk = p.spot_blocks.front();
  Rng rng(2);

  SUBCASE("single token") {
    const Tensor t = Tensor::from_matrix(random_matrix(1, 4, rng));
    const Tensor h = t + blk.out(blk.value(blk.ln1(t)));
    const Matrix expected = (h + blk.mlp_out(gelu(blk.mlp_in(blk.ln2(h))))).value();
    const Matrix got = transformer_block(t, blk, 2, 0.0, false, rng).value();
    CHECK((got - expected).cwiseAbs().maxCoeff() < 1e-14);
  }
  SUBCASE("zero projections give the identity") {
    blk.out.weight.mutable_value().setZero();
    blk.mlp_out.weight.mutable_value().setZero();
    const Tensor t = Tensor::from_matrix(random_matrix(5, 4, rng));
    CHECK(transformer_block(t, blk, 2, 0.0, false, rng).value() == t.value());
  }
  SUBCASE("permutation equivariance") {
    const Matrix x = random_matrix(6, 4, rng);
    const std::vector<Index> perm{3, 0, 5, 1, 4, 2};
    Matrix px(6, 4);
    for (Index i = 0; i < 6; ++i) px.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
    const Matrix a = transformer_block(Tensor::from_matrix(x), blk, 2, 0.0, false, rng).value();
    const Matrix b = transformer_block(Tensor::from_matrix(px), blk, 2, 0.0, false, rng).value();
    for (Index i = 0; i < 6; ++i) CHECK((b.row(i) - a.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("heads must divide width") {
    CHECK_THROWS_AS(transformer_block(Tensor::zeros({2, 4}), blk, 3, 0.0, false, rng), ConfigError);
  }
}

TEST_CASE("neighbor pooling") {
  NeighborTensor nb;
  nb.values = Matrix::Zero(2 * kNeighborTokens, 2);
  nb.valid = Eigen::Array<bool, Eigen::Dynamic, 1>::Constant(2 * kNeighborTokens, false);
  // Spot 0: every token equals v. Spot 1: only tokens 12 and 3 valid.
  for (Index t = 0; t < kNeighborTokens; ++t) {
    nb.values.row(t) << 1.5, -2.0;
    nb.valid[t] = true;
  }
  nb.values.row(kNeighborTokens + 12) << 1.0, 4.0;
  nb.values.row(kNeighborTokens + 3) << 3.0, 0.0;
  nb.valid[kNeighborTokens + 12] = true;
  nb.valid[kNeighborTokens + 3] = true;
  const auto op = neighbor_pool_operator(nb);
  const Matrix pooled = neighbor_pool(Tensor::from_matrix(nb.values), *op).value();
  CHECK(pooled(0, 0) == doctest::Approx(1.5));
  CHECK(pooled(0, 1) == doctest::Approx(-2.0));
  CHECK(pooled(1, 0) == 2.0);
  CHECK(pooled(1, 1) == 2.0);

  nb.valid[kNeighborTokens + 3] = false;
  const Matrix single = neighbor_pool(Tensor::from_matrix(nb.values), *neighbor_pool_operator(nb)).value();
  CHECK(single(1, 0) == 1.0);
  CHECK(single(1, 1) == 4.0);
}

TEST_CASE("cross_attention") {
  auto scalar_linear = [](double w) { return Linear{Tensor::from_data({1, 1}, {w}), Tensor::zeros({1, 1})}; };
  CrossAttentionParams p{scalar_linear(1), scalar_linear(1), scalar_linear(1), scalar_linear(1)};

  SUBCASE("n = 2 by hand") {
    const Tensor prompt = Tensor::from_data({2, 1}, {1, 2});
    const Tensor tokens = Tensor::from_data({2, 1}, {0, 1});
    const Matrix out = cross_attention(prompt, tokens, p, 1).value();
    // Row i attends with scores prompt_i * [0, 1].
    CHECK(out(0, 0) == doctest::Approx(std::exp(1.0) / (1.0 + std::exp(1.0))).epsilon(1e-14));
    CHECK(out(1, 0) == doctest::Approx(std::exp(2.0) / (1.0 + std::exp(2.0))).epsilon(1e-14));
  }
  SUBCASE("zero queries average uniformly") {
    const Tensor prompt = Tensor::zeros({3, 1});
    const Tensor tokens = Tensor::from_data({3, 1}, {1, 2, 6});
    const Matrix out = cross_attention(prompt, tokens, p, 1).value();
    CHECK((out.array() - 3.0).abs().maxCoeff() < 1e-14);
  }

  const ModelConfig cfg = tiny_config(3, 5);
  const ModelParams mp = init_params(cfg, 8);
  Rng rng(6);
  SUBCASE("identical keys and values ignore the queries") {
    const Matrix v = random_matrix(1, 4, rng);
    const Tensor tokens = Tensor::from_matrix(v.replicate(5, 1));
    const Matrix a = cross_attention(Tensor::from_matrix(random_matrix(5, 4, rng)), tokens, mp.cross, 2).value();
    const Matrix b = cross_attention(Tensor::from_matrix(random_matrix(5, 4, rng)), tokens, mp.cross, 2).value();
    const Matrix expected = mp.cross.out(mp.cross.value(Tensor::from_matrix(v))).value();
    for (Index i = 0; i < 5; ++i) {
      CHECK((a.row(i) - expected).cwiseAbs().maxCoeff() < 1e-12);
      CHECK((b.row(i) - expected).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("local scope sees only the own spot") {
    const Tensor tokens = Tensor::from_matrix(random_matrix(5, 4, rng));
    const Matrix out =
        cross_attention(Tensor::from_matrix(random_matrix(5, 4, rng)), tokens, mp.cross, 2, AttentionScope::kLocal).value();
    CHECK(out == mp.cross.out(mp.cross.value(tokens)).value());
  }
  SUBCASE("row mismatch") {
    CHECK_THROWS_AS(cross_attention(Tensor::zeros({3, 4}), Tensor::zeros({2, 4}), mp.cross, 2), DimensionError);
  }
}

TEST_CASE("fuse") {
  Rng rng(3);
  const Tensor a = Tensor::from_matrix(random_matrix(3, 4, rng), true);
  const Tensor b = Tensor::from_matrix(random_matrix(3, 4, rng), true);
  CHECK(fuse(a, Tensor::zeros({3, 4})).value() == a.value());
  CHECK(fuse(a, b).value() == fuse(b, a).value());
  backward(sum(fuse(a, b)));
  CHECK(a.grad() == Matrix::Ones(3, 4));
  CHECK(b.grad() == Matrix::Ones(3, 4));
  CHECK_THROWS_AS(fuse(a, Tensor::zeros({3, 5})), DimensionError);
}

TEST_CASE("forward shapes and determinism") {
  const PreparedSlide slide = prepared(10, 10, 16, 20, 1);
  ModelConfig cfg = tiny_config(16, 20);
  cfg.width = 8;
  cfg.prompt_width = 8;
  cfg.attn_width = 8;
  const ModelParams p = init_params(cfg, 2);
  Rng r1(42), r2(42);
  const ForwardOutputs a = forward(slide, 0.3, p, cfg, true, r1);
  const ForwardOutputs b = forward(slide, 0.3, p, cfg, true, r2);
  for (const Tensor* t : {&a.p_fused, &a.p_spot, &a.p_neighbor}) {
    CHECK(t->rows() == 100);
    CHECK(t->cols() == 20);
    CHECK(t->value().allFinite());
  }
  CHECK(a.spot_tokens.cols() == 8);
  CHECK(a.guided_neighbor_tokens.rows() == 100);
  CHECK(a.p_fused.value() == b.p_fused.value());
  CHECK(a.p_spot.value() == b.p_spot.value());
  CHECK(a.p_neighbor.value() == b.p_neighbor.value());
  CHECK(r1.counter() == r2.counter());

  CHECK_THROWS_AS(forward(slide, Matrix::Zero(100, 19), p, cfg, false, r1), DimensionError);
}

TEST_CASE("prompt path isolation") {
  const PreparedSlide slide = prepared(6, 6, 5, 4, 3);
  const ModelConfig cfg = tiny_config(5, 4);
  const ModelParams p = init_params(cfg, 4);
  for (bool training : {false, true}) {
    Rng r0(7), r5(7);
    const ForwardOutputs zero = forward(slide, 0.0, p, cfg, training, r0);
    const ForwardOutputs half = forward(slide, 0.5, p, cfg, training, r5);
    CHECK(zero.spot_tokens.value() == half.spot_tokens.value());
    CHECK(zero.p_spot.value() == half.p_spot.value());
    CHECK(zero.neighbor_tokens.value() == half.neighbor_tokens.value());
    CHECK(zero.p_neighbor.value() != half.p_neighbor.value());
  }
  Rng ra(1), rb(1);
  Rng content(5);
  const ForwardOutputs a = forward(slide, random_matrix(36, 4, content), p, cfg, true, ra);
  const ForwardOutputs b = forward(slide, random_matrix(36, 4, content), p, cfg, true, rb);
  CHECK(a.p_spot.value() == b.p_spot.value());
}

TEST_CASE("guided neighbour tokens") {
  const PreparedSlide slide = prepared(6, 6, 5, 4, 3);
  ModelConfig cfg = tiny_config(5, 4);
  cfg.dropout = 0.0;
  const ModelParams p = init_params(cfg, 4);
  CHECK_FALSE(ModelConfig{}.guidance_residual);

  // Zero prompts give one shared query, so global guidance is row-constant.
  Rng r0(7);
  const ForwardOutputs plain = forward(slide, 0.0, p, cfg, false, r0);
  const Matrix g = plain.guided_neighbor_tokens.value();
  CHECK((g.rowwise() - g.row(0)).cwiseAbs().maxCoeff() < 1e-12);

  cfg.guidance_residual = true;
  Rng r1(7);
  const ForwardOutputs resid = forward(slide, 0.0, p, cfg, false, r1);
  CHECK((resid.guided_neighbor_tokens.value() - plain.neighbor_tokens.value() - g).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("branch ablation flags") {
  const PreparedSlide slide = prepared(5, 5, 3, 2, 9);
  ModelConfig cfg = tiny_config(3, 2);
  const ModelParams p = init_params(cfg, 1);
  const Tensor target = Tensor::from_matrix(slide.expression);

  cfg.use_spot_branch = false;
  Rng r1(3);
  const ForwardOutputs no_spot = forward(slide, 0.3, p, cfg, false, r1);
  CHECK_FALSE(no_spot.p_spot.defined());
  CHECK(no_spot.fused_tokens.value() == no_spot.guided_neighbor_tokens.value());
  CHECK(compute_loss(no_spot, target, 0.3).spot == 0.0);

  cfg.use_spot_branch = true;
  cfg.use_neighbor_branch = false;
  Rng r2(3);
  const ForwardOutputs no_nb = forward(slide, 0.3, p, cfg, false, r2);
  CHECK_FALSE(no_nb.p_neighbor.defined());
  CHECK(no_nb.fused_tokens.value() == no_nb.spot_tokens.value());
  const LossTerms terms = compute_loss(no_nb, target, 0.3);
  CHECK(terms.neighbor == 0.0);
  CHECK(terms.total.item() == doctest::Approx(terms.fused + terms.spot));

  cfg.use_spot_branch = false;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("compute_loss") {
  Rng rng(4);
  const Matrix g = random_matrix(7, 3, rng);
  ForwardOutputs perfect;
  perfect.p_fused = perfect.p_spot = perfect.p_neighbor = Tensor::from_matrix(g);
  CHECK(compute_loss(perfect, Tensor::from_matrix(g), 0.3).total.item() == 0.0);

  ForwardOutputs off;
  off.p_fused = off.p_spot = off.p_neighbor = Tensor::from_matrix((g.array() + 1.0).matrix());
  const LossTerms t = compute_loss(off, Tensor::from_matrix(g), 0.3);
  CHECK(t.fused == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(t.spot == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(t.neighbor == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(t.total.item() == doctest::Approx(3.0).epsilon(1e-12));

  ForwardOutputs noisy;
  noisy.p_fused = Tensor::from_matrix(random_matrix(7, 3, rng));
  noisy.p_spot = Tensor::from_matrix(random_matrix(7, 3, rng));
  noisy.p_neighbor = Tensor::from_matrix(random_matrix(7, 3, rng));
  const Tensor target = Tensor::from_matrix(g);
  const LossTerms base = compute_loss(noisy, target, 0.0);
  for (double lambda : {0.3, 0.9, 1.0, 0.1, 0.7}) {
    const LossTerms other = compute_loss(noisy, target, lambda);
    CHECK(other.spot == base.spot);
    CHECK(other.neighbor == base.neighbor);
    CHECK(other.total.item() == base.total.item());
  }
  CHECK(base.total.item() >= 0.0);
  CHECK_THROWS_AS(compute_loss(noisy, target, 1.5), ParameterError);
}

TEST_CASE("slide-level permutation equivariance of T_s") {
  const SlideBundle b = lattice_bundle(5, 6, 4, 3, 21);
  Rng rng(2);
  ExpressionMatrix e;
  e.values = random_matrix(b.n(), 3, rng, 0, 2);

  std::vector<Index> perm(static_cast<std::size_t>(b.n()));
  for (Index i = 0; i < b.n(); ++i) perm[static_cast<std::size_t>(i)] = (i * 7 + 3) % b.n();
  SlideBundle pb = b;
  ExpressionMatrix pe = e;
  for (Index i = 0; i < b.n(); ++i) {
    const Index src = perm[static_cast<std::size_t>(i)];
    pb.coords.row(i) = b.coords.row(src);
    pb.grid.row(i) = b.grid.row(src);
    pb.spot_features.row(i) = b.spot_features.row(src);
    pe.values.row(i) = e.values.row(src);
  }
  const ModelConfig cfg = tiny_config(4, 3);
  const ModelParams p = init_params(cfg, 5);
  const PreparedSlide s = prepare_slide(b, e, {});
  const PreparedSlide ps = prepare_slide(pb, pe, {});
  Rng r1(0), r2(0);
  const Matrix t = forward(s, Matrix::Zero(b.n(), 3), p, cfg, false, r1).spot_tokens.value();
  const Matrix pt = forward(ps, Matrix::Zero(b.n(), 3), p, cfg, false, r2).spot_tokens.value();
  for (Index i = 0; i < b.n(); ++i)
    CHECK((pt.row(i) - t.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("end-to-end gradient on a 12-spot slide") {
  const PreparedSlide slide = prepared(3, 4, 3, 2, 5, 3);
  ModelConfig cfg = tiny_config(3, 2);
  const ModelParams p = init_params(cfg, 6);
  // Non-zero biases and gains so every path carries gradient.
  Rng jitter(8);
  std::vector<Tensor> leaves;
  for (auto& [name, t] : p.named_parameters()) {
    auto v = t.mutable_value();
    for (Index i = 0; i < v.size(); ++i) v.data()[i] += 0.2 * (jitter.uniform() - 0.5);
    leaves.push_back(t);
  }
  Rng mask_rng(2);
  const Matrix prompt = mask_expression(slide.expression, 0.5, mask_rng).values;
  const Tensor target = Tensor::from_matrix(slide.expression);
  const double err = gradcheck(leaves, [&] {
    Rng r(13);
    return compute_loss(forward(slide, prompt, p, cfg, true, r), target, 0.3).total;
  });
  CHECK(err < 1e-3);
}

TEST_CASE("parameters and checkpoints") {
  const ModelConfig cfg = tiny_config(3, 5);
  const ModelParams p = init_params(cfg, 11);
  const auto named = p.named_parameters();
  CHECK(p.all_finite());
  CHECK(named.front().first == "prompt.project.weight");
  CHECK(named.back().first == "fused_head.bias");
  CHECK(p.fused_head.weight.cols() == 5);
  std::set<std::string> names;
  for (const auto& [n, t] : named) {
    names.insert(n);
    CHECK(t.requires_grad());
  }
  CHECK(names.size() == named.size());

  const ModelParams again = init_params(cfg, 11);
  CHECK(snapshot(again) == snapshot(p));

  const ModelParams c = p.clone();
  c.fused_head.weight.mutable_value().setZero();
  CHECK_FALSE(p.fused_head.weight.value().isZero());

  const auto file = std::filesystem::temp_directory_path() / "phg2st_test.phgc";
  save_checkpoint(file, snapshot(p), R"({"epoch": 3})");
  const Checkpoint ck = load_checkpoint(file);
  CHECK(ck.header_json.find("\"epoch\":3") != std::string::npos);
  ModelParams fresh = init_params(cfg, 99);
  restore(fresh, ck.tensors);
  CHECK(snapshot(fresh) == snapshot(p));

  auto broken = ck.tensors;
  broken.front().second = Matrix::Zero(2, 2);
  CHECK_THROWS_AS(restore(fresh, broken), CheckpointError);
  auto missing = ck.tensors;
  missing.pop_back();
  CHECK_THROWS_AS(restore(fresh, missing), CheckpointError);

  {
    std::ofstream out(file, std::ios::binary);
    out << "JUNKJUNKJUNKJUNK";
  }
  CHECK_THROWS_AS(load_checkpoint(file), CheckpointError);
  std::filesystem::remove(file);
  CHECK_THROWS_AS(load_checkpoint(file), CheckpointError);

  ModelConfig bad = cfg;
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

#include <doctest.h>

#include "test_helpers.hpp"
#include "voxmae/autodiff.hpp"

using namespace voxmae;
namespace ad = voxmae::ad;
using testutil::gradcheck;
using testutil::random_tensor;

TEST_SUITE("autodiff") {
  TEST_CASE("elementwise ops with broadcast pass finite-difference checks") {
    Rng rng(101);
    auto a = ad::leaf(random_tensor({3, 4}, rng), "a");
    auto b = ad::leaf(random_tensor({4}, rng, 0.5, 1.5), "b");
    gradcheck([&] { return ad::mean_all(ad::add(a, b)); }, {a, b}, rng);
    gradcheck([&] { return ad::mean_all(ad::sub(a, b)); }, {a, b}, rng);
    gradcheck([&] { return ad::mean_all(ad::mul(a, b)); }, {a, b}, rng);
    gradcheck([&] { return ad::mean_all(ad::div(a, b)); }, {a, b}, rng);
    gradcheck([&] { return ad::mean_all(ad::square(a)); }, {a}, rng);
    gradcheck([&] { return ad::mean_all(ad::scale(a, 2.5)); }, {a}, rng);
    gradcheck([&] { return ad::mean_all(ad::add_scalar(a, 1.5)); }, {a}, rng);
    auto pos = ad::leaf(random_tensor({5}, rng, 0.5, 2.0), "pos");
    gradcheck([&] { return ad::mean_all(ad::sqrt(pos)); }, {pos}, rng);
    auto c = ad::leaf(random_tensor({6}, rng, 0.2, 1.0), "c");  // away from relu kink
    gradcheck([&] { return ad::mean_all(ad::relu(c)); }, {c}, rng);
    gradcheck([&] { return ad::mean_all(ad::gelu(a)); }, {a}, rng);
  }

  TEST_CASE("shape ops pass finite-difference checks") {
    Rng rng(103);
    auto a = ad::leaf(random_tensor({2, 3, 4}, rng), "a");
    gradcheck([&] { return ad::mean_all(ad::square(ad::reshape(a, {6, 4}))); }, {a}, rng);
    gradcheck([&] { return ad::mean_all(ad::square(ad::permute(a, {2, 0, 1}))); }, {a}, rng);
    gradcheck([&] { return ad::mean_all(ad::square(ad::slice(a, 1, 1, 2))); }, {a}, rng);
    auto b = ad::leaf(random_tensor({2, 2, 4}, rng), "b");
    gradcheck([&] { return ad::mean_all(ad::square(ad::concat({a, b}, 1))); }, {a, b}, rng);
    auto row = ad::leaf(random_tensor({5}, rng), "row");
    gradcheck([&] { return ad::mean_all(ad::square(ad::tile_rows(row, 7))); }, {row}, rng);
  }

  TEST_CASE("reductions pass finite-difference checks") {
    Rng rng(107);
    auto a = ad::leaf(random_tensor({2, 3, 4}, rng), "a");
    gradcheck([&] { return ad::mean_all(ad::square(ad::sum(a, {1}, true))); }, {a}, rng);
    gradcheck([&] { return ad::mean_all(ad::square(ad::sum(a, {0, 2}, false))); }, {a}, rng);
    gradcheck([&] { return ad::mean_all(ad::square(ad::mean(a, {2}, false))); }, {a}, rng);
  }

  TEST_CASE("matmul family passes finite-difference checks") {
    Rng rng(109);
    auto a = ad::leaf(random_tensor({3, 4}, rng), "a");
    auto b = ad::leaf(random_tensor({4, 5}, rng), "b");
    gradcheck([&] { return ad::mean_all(ad::square(ad::matmul(a, b))); }, {a, b}, rng);
    auto x = ad::leaf(random_tensor({2, 3, 4}, rng), "x");
    auto w = ad::leaf(random_tensor({4, 6}, rng), "w");
    auto bias = ad::leaf(random_tensor({6}, rng), "bias");
    gradcheck([&] { return ad::mean_all(ad::square(ad::linear(x, w, bias))); }, {x, w, bias}, rng);
    auto p = ad::leaf(random_tensor({2, 3, 4}, rng), "p");
    auto q = ad::leaf(random_tensor({2, 4, 5}, rng), "q");
    gradcheck([&] { return ad::mean_all(ad::square(ad::bmm(p, q))); }, {p, q}, rng);
    auto qt = ad::leaf(random_tensor({2, 5, 4}, rng), "qt");
    gradcheck([&] { return ad::mean_all(ad::square(ad::bmm_nt(p, qt))); }, {p, qt}, rng);
  }

  TEST_CASE("softmax / layer_norm / batchnorm / cross-entropy pass checks") {
    Rng rng(113);
    auto a = ad::leaf(random_tensor({4, 5}, rng), "a");
    gradcheck([&] { return ad::mean_all(ad::square(ad::softmax(a))); }, {a}, rng);
    auto g = ad::leaf(random_tensor({5}, rng, 0.5, 1.5), "g");
    auto be = ad::leaf(random_tensor({5}, rng), "be");
    gradcheck([&] { return ad::mean_all(ad::square(ad::layer_norm(a, g, be))); }, {a, g, be}, rng);

    Tensor rm({5}), rv({5}, 1.0);
    gradcheck(
        [&] {
          Tensor rm2 = rm.clone(), rv2 = rv.clone();
          return ad::mean_all(ad::square(ad::batchnorm_rows(a, g, be, rm2, rv2, true)));
        },
        {a, g, be}, rng, 5e-6);
    gradcheck(
        [&] {
          Tensor rm2 = rm.clone(), rv2 = rv.clone();
          return ad::mean_all(ad::square(ad::batchnorm_rows(a, g, be, rm2, rv2, false)));
        },
        {a, g, be}, rng);

    std::vector<i64> labels = {1, 0, 4, 2};
    gradcheck([&] { return ad::cross_entropy_logits(a, labels); }, {a}, rng);
  }

  TEST_CASE("conv ops pass finite-difference checks") {
    Rng rng(127);
    auto x = ad::leaf(random_tensor({2, 5, 5, 5, 3}, rng), "x");
    auto w = ad::leaf(random_tensor({3, 3, 3, 3, 4}, rng), "w");
    auto b = ad::leaf(random_tensor({4}, rng), "b");
    gradcheck([&] { return ad::mean_all(ad::square(ad::conv3d(x, w, b, 2, 1))); }, {x, w, b}, rng);

    auto wd = ad::leaf(random_tensor({3, 3, 3, 3}, rng), "wd");
    auto bd = ad::leaf(random_tensor({3}, rng), "bd");
    gradcheck([&] { return ad::mean_all(ad::square(ad::dwconv3d(x, wd, bd, 1))); }, {x, wd, bd},
              rng);

    auto xt = ad::leaf(random_tensor({1, 3, 3, 3, 2}, rng), "xt");
    auto wt = ad::leaf(random_tensor({2, 2, 2, 2, 3}, rng), "wt");
    auto bt = ad::leaf(random_tensor({3}, rng), "bt");
    gradcheck([&] { return ad::mean_all(ad::square(ad::deconv3d(xt, wt, bt, 2))); }, {xt, wt, bt},
              rng);
  }

  TEST_CASE("resize / pool / gather / zone ops pass checks") {
    Rng rng(131);
    auto x = ad::leaf(random_tensor({1, 3, 4, 5, 2}, rng), "x");
    gradcheck([&] { return ad::mean_all(ad::square(ad::upsample_nearest(x, 2))); }, {x}, rng);
    gradcheck([&] { return ad::mean_all(ad::square(ad::upsample_trilinear(x, 5, 7, 9))); }, {x},
              rng);
    gradcheck([&] { return ad::mean_all(ad::square(ad::avgpool_to(x, 2, 2, 2))); }, {x}, rng);

    auto tok = ad::leaf(random_tensor({2, 8, 3}, rng), "tok");
    std::vector<i64> idx;
    for (i64 b = 0; b < 2; ++b) {
      auto perm = Rng(b + 5).permutation(8);
      for (int i = 0; i < 5; ++i) idx.push_back(perm[i]);
    }
    gradcheck([&] { return ad::mean_all(ad::square(ad::gather_rows(tok, idx, 2, 5))); }, {tok},
              rng);

    auto feat = ad::leaf(random_tensor({30, 4}, rng), "feat");
    std::vector<std::int32_t> zones(30);
    std::vector<i64> counts(3, 0);
    for (int v = 0; v < 30; ++v) {
      zones[v] = static_cast<std::int32_t>(v % 4);  // 0..3, 0 is background
      if (zones[v] > 0) counts[zones[v] - 1]++;
    }
    gradcheck([&] { return ad::mean_all(ad::square(ad::zone_mean(feat, zones, counts))); }, {feat},
              rng);
  }

  TEST_CASE("repeated use of one node accumulates gradients") {
    Rng rng(137);
    auto a = ad::leaf(random_tensor({3}, rng), "a");
    gradcheck([&] { return ad::mean_all(ad::mul(a, a)); }, {a}, rng);
    gradcheck([&] { return ad::mean_all(ad::add(ad::square(a), ad::scale(a, 3.0))); }, {a}, rng);
  }

  TEST_CASE("backward through a small composite graph") {
    Rng rng(139);
    auto x = ad::leaf(random_tensor({4, 6}, rng), "x");
    auto w1 = ad::leaf(random_tensor({6, 8}, rng), "w1");
    auto b1 = ad::leaf(random_tensor({8}, rng), "b1");
    auto w2 = ad::leaf(random_tensor({8, 3}, rng), "w2");
    auto b2 = ad::leaf(random_tensor({3}, rng), "b2");
    std::vector<i64> labels = {0, 2, 1, 1};
    gradcheck(
        [&] {
          auto h = ad::gelu(ad::linear(x, w1, b1));
          auto logits = ad::linear(h, w2, b2);
          return ad::cross_entropy_logits(logits, labels);
        },
        {x, w1, b1, w2, b2}, rng);
  }
}

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "prdu/encoder.hpp"
#include "prdu/gradcheck.hpp"

using namespace prdu;

namespace {

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.same_shape(b) &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

FlattenedInput token_input(std::vector<int> tokens) {
  FlattenedInput in;
  in.utterance_index.assign(tokens.size(), 1);
  in.tokens = std::move(tokens);
  return in;
}

EncoderParams small_encoder(bool use_rnn, std::uint64_t seed) {
  Rng rng(seed);
  return init_encoder(EncoderDims{10, 4, 3, 2}, InputMode::TokenIds, use_rnn, 0, rng);
}

}  // namespace

TEST_CASE("embedding lookup") {
  EncoderParams enc = small_encoder(true, 1);
  SECTION("repeated ids give identical rows") {
    Tensor e = embed(nullptr, token_input({5, 5, 5}), enc);
    REQUIRE(e.shape() == std::vector<int>({3, 4}));
    for (int j = 0; j < 4; ++j) {
      CHECK(e.at(0, j) == e.at(1, j));
      CHECK(e.at(1, j) == e.at(2, j));
    }
  }
  SECTION("length-1 boundary") {
    Tensor e = embed(nullptr, token_input({7}), enc);
    CHECK(e.shape() == std::vector<int>({1, 4}));
  }
  SECTION("out-of-vocabulary id rejected") {
    CHECK_THROWS_AS(embed(nullptr, token_input({10}), enc), std::invalid_argument);
  }
  SECTION("feature mode passes rows through") {
    Rng rng(2);
    EncoderParams feats = init_encoder(EncoderDims{10, 4, 3, 2}, InputMode::FeatureVectors,
                                       false, 3, rng);
    FlattenedInput in;
    in.features = {{1.0, 2.0, 3.0}, {4.0, 5.0, 6.0}};
    in.utterance_index = {1, 2};
    Tensor e = embed(nullptr, in, feats);
    CHECK(e.at(0, 0) == 1.0);
    CHECK(e.at(1, 2) == 6.0);
    in.features[1] = {1.0};  // wrong width
    CHECK_THROWS_AS(embed(nullptr, in, feats), std::invalid_argument);
  }
}

TEST_CASE("bidirectional gru") {
  SECTION("zero weights collapse every state to zero") {
    // z = sigmoid(0) = 0.5, candidate = tanh(0) = 0, h = 0.5 * h_prev
    EncoderParams enc = small_encoder(true, 3);
    for (Tensor* t : {&enc.fwd.w_update, &enc.fwd.w_reset, &enc.fwd.w_cand, &enc.fwd.u_update,
                      &enc.fwd.u_reset, &enc.fwd.u_cand, &enc.fwd.b_update, &enc.fwd.b_reset,
                      &enc.fwd.b_cand, &enc.bwd.w_update, &enc.bwd.w_reset, &enc.bwd.w_cand,
                      &enc.bwd.u_update, &enc.bwd.u_reset, &enc.bwd.u_cand, &enc.bwd.b_update,
                      &enc.bwd.b_reset, &enc.bwd.b_cand})
      *t = Tensor::zeros_like(*t);
    Tensor e = embed(nullptr, token_input({1, 2, 3, 4}), enc);
    Tensor h = bigru_forward(nullptr, e, enc);
    REQUIRE(h.shape() == std::vector<int>({4, 6}));
    for (int i = 0; i < h.size(); ++i) CHECK(h.data()[i] == 0.0);
  }
  SECTION("single step with shared direction weights is symmetric") {
    EncoderParams enc = small_encoder(true, 4);
    enc.bwd = enc.fwd;
    Tensor e = embed(nullptr, token_input({6}), enc);
    Tensor h = bigru_forward(nullptr, e, enc);
    REQUIRE(h.shape() == std::vector<int>({1, 6}));
    for (int j = 0; j < 3; ++j) CHECK(h.at(0, j) == h.at(0, j + 3));
  }
  SECTION("output shape contract") {
    EncoderParams enc = small_encoder(true, 5);
    Tensor e = embed(nullptr, token_input({0, 1, 2, 3, 4, 5, 6}), enc);
    CHECK(bigru_forward(nullptr, e, enc).shape() == std::vector<int>({7, 6}));
    Tensor wrong({2, 7});
    CHECK_THROWS_AS(bigru_forward(nullptr, wrong, enc), std::invalid_argument);
  }
}

TEST_CASE("pooling") {
  SECTION("single row is unchanged") {
    Tensor row({1, 3}, {1.5, -2.0, 0.25});
    Tensor p = pool(nullptr, row);
    for (int j = 0; j < 3; ++j) CHECK(p.at(j) == row.at(0, j));
  }
  SECTION("hand mean") {
    Tensor rows({2, 2}, {1, 3, 3, 5});
    Tensor p = pool(nullptr, rows);
    CHECK(p.at(0) == 2.0);
    CHECK(p.at(1) == 4.0);
  }
  SECTION("permutation invariance") {
    Rng rng(6);
    Tensor rows({4, 3});
    for (int i = 0; i < rows.size(); ++i) rows.data()[i] = rng.next_uniform(-1, 1);
    Tensor swapped = rows.clone();
    for (int j = 0; j < 3; ++j) {
      std::swap(swapped.data()[0 * 3 + j], swapped.data()[2 * 3 + j]);
      std::swap(swapped.data()[1 * 3 + j], swapped.data()[3 * 3 + j]);
    }
    Tensor p1 = pool(nullptr, rows);
    Tensor p2 = pool(nullptr, swapped);
    for (int j = 0; j < 3; ++j) CHECK(std::abs(p1.at(j) - p2.at(j)) < 1e-15);
  }
}

TEST_CASE("attention") {
  SECTION("single row reduces to its value projection") {
    EncoderParams enc = small_encoder(false, 7);  // d_model = 4
    Tensor rows({1, 4}, {0.3, -1.0, 2.0, 0.5});
    Tensor out = attend(nullptr, pool(nullptr, rows), rows, enc);
    Tensor expected = matmul(nullptr, enc.w_value, select_row(nullptr, rows, 0));
    CHECK(bit_equal(out, expected));
  }
  SECTION("two identical rows average to the same projection") {
    EncoderParams enc = small_encoder(false, 8);
    Tensor rows({2, 4}, {0.3, -1.0, 2.0, 0.5, 0.3, -1.0, 2.0, 0.5});
    Tensor out = attend(nullptr, pool(nullptr, rows), rows, enc);
    Tensor expected = matmul(nullptr, enc.w_value, select_row(nullptr, rows, 0));
    for (int j = 0; j < 4; ++j) CHECK(std::abs(out.at(j) - expected.at(j)) < 1e-12);
  }
  SECTION("hand-evaluated scaled dot products with identity projections") {
    EncoderParams enc;
    enc.use_rnn = false;
    enc.input_mode = InputMode::FeatureVectors;
    enc.feature_width = 2;
    enc.w_query = Tensor({2, 2}, {1, 0, 0, 1});
    enc.w_key = Tensor({2, 2}, {1, 0, 0, 1});
    enc.w_value = Tensor({2, 2}, {1, 0, 0, 1});
    Tensor rows({2, 2}, {1, 0, 0, 1});
    Tensor query({2}, {1, 0});
    Tensor out = attend(nullptr, query, rows, enc);
    const double s0 = 1.0 / std::sqrt(2.0);
    const double w0 = std::exp(s0) / (std::exp(s0) + 1.0);
    CHECK(std::abs(out.at(0) - w0) < 1e-12);
    CHECK(std::abs(out.at(1) - (1.0 - w0)) < 1e-12);
    CHECK(std::abs(w0 - 0.6698) < 1e-4);
  }
  SECTION("output stays in the convex hull of value-projected rows") {
    Rng rng(9);
    for (int trial = 0; trial < 50; ++trial) {
      EncoderParams enc = small_encoder(false, 100 + static_cast<std::uint64_t>(trial));
      const int steps = 1 + static_cast<int>(rng.next_below(6));
      Tensor rows({steps, 4});
      for (int i = 0; i < rows.size(); ++i) rows.data()[i] = rng.next_uniform(-2, 2);
      Tensor projected = matmul(nullptr, rows, transpose(nullptr, enc.w_value));
      Tensor out = attend(nullptr, pool(nullptr, rows), rows, enc);
      for (int j = 0; j < 4; ++j) {
        double lo = projected.at(0, j), hi = projected.at(0, j);
        for (int t = 1; t < steps; ++t) {
          lo = std::min(lo, projected.at(t, j));
          hi = std::max(hi, projected.at(t, j));
        }
        CHECK(out.at(j) >= lo - 1e-12);
        CHECK(out.at(j) <= hi + 1e-12);
      }
    }
  }
}

TEST_CASE("encode pipeline") {
  SECTION("evaluation ignores the rng") {
    EncoderParams enc = small_encoder(true, 10);
    Rng r1(1), r2(999);
    Tensor a = encode(nullptr, token_input({1, 2, 3}), enc, DropoutSpec{0.5, false, &r1});
    Tensor b = encode(nullptr, token_input({1, 2, 3}), enc, DropoutSpec{0.5, false, &r2});
    CHECK(bit_equal(a, b));
  }
  SECTION("no-rnn single token is its value-projected embedding") {
    EncoderParams enc = small_encoder(false, 11);
    Tensor out = encode(nullptr, token_input({4}), enc);
    Tensor emb_row = select_row(nullptr, embed(nullptr, token_input({4}), enc), 0);
    Tensor expected = matmul(nullptr, enc.w_value, emb_row);
    CHECK(bit_equal(out, expected));
  }
  SECTION("training dropout is reproducible under a fixed seed") {
    EncoderParams enc = small_encoder(true, 12);
    Rng r1(42), r2(42), r3(43);
    Tensor a = encode(nullptr, token_input({1, 2, 3, 4}), enc, DropoutSpec{0.3, true, &r1});
    Tensor b = encode(nullptr, token_input({1, 2, 3, 4}), enc, DropoutSpec{0.3, true, &r2});
    Tensor c = encode(nullptr, token_input({1, 2, 3, 4}), enc, DropoutSpec{0.3, true, &r3});
    CHECK(bit_equal(a, b));
    CHECK_FALSE(bit_equal(a, c));
  }
  SECTION("no-rnn encoding ignores utterance indices") {
    EncoderParams enc = small_encoder(false, 13);
    FlattenedInput one = token_input({1, 2, 3});
    FlattenedInput other = token_input({1, 2, 3});
    other.utterance_index = {1, 1, 2};
    CHECK(bit_equal(encode(nullptr, one, enc), encode(nullptr, other, enc)));
  }
  SECTION("padded positions beyond the valid length change nothing") {
    for (bool use_rnn : {true, false}) {
      EncoderParams enc = small_encoder(use_rnn, 14);
      FlattenedInput clean = token_input({1, 2, 3});
      FlattenedInput padded = token_input({1, 2, 3, 0, 0, 9});
      CHECK(bit_equal(encode(nullptr, clean, enc),
                      encode(nullptr, padded, enc, {}, clean.length())));
    }
  }
  SECTION("empty input rejected") {
    EncoderParams enc = small_encoder(true, 15);
    CHECK_THROWS_AS(encode(nullptr, FlattenedInput{}, enc), std::invalid_argument);
  }
}

TEST_CASE("encode gradients match finite differences") {
  for (bool use_rnn : {true, false}) {
    EncoderParams enc = small_encoder(use_rnn, 20);
    FlattenedInput input = token_input({1, 5, 2, 8});

    auto build = [&](Tape* tape) {
      Tensor code = encode(tape, input, enc);
      return sum_all(tape, tanh_op(tape, code));
    };

    Tape tape;
    std::vector<ParamRef> params;
    enc.append_params("enc", params);
    for (const ParamRef& ref : params) tape.watch(*ref.tensor);
    const GradientMap grads = tape.backward(build(&tape));

    auto value = [&] { return build(static_cast<Tape*>(nullptr)).value(); };
    for (const ParamRef& ref : params) {
      Tensor numeric = finite_difference_gradient(value, *ref.tensor, 1e-5);
      INFO(ref.name);
      CHECK(gradient_max_rel_error(grads.grad(*ref.tensor), numeric) < 1e-4);
    }
  }
}

#include <doctest.h>

#include <algorithm>

#include "ptk/error.hpp"
#include "ptk/perfmodel.hpp"
#include "ptk/presets.hpp"

using namespace ptk::perf;

TEST_CASE("embedding and head only") {
  ArchConfig c;
  c.num_layers = 0;
  c.final_norm = false;
  c.tied_embeddings = false;
  CHECK(param_count(c) == 2 * 205520896LL);
  c.tied_embeddings = true;
  CHECK(param_count(c) == 205520896LL);
}

TEST_CASE("committed architecture preset") {
  const auto preset = ptk::presets::table2();
  const auto p = param_breakdown(preset.config);
  CHECK(p.attention_per_layer == 4LL * 2048 * 2048 + 3 * 2048);
  CHECK(p.ffn_per_layer == 3LL * 2048 * 5632);
  CHECK(p.norms_per_layer == 2 * 2048);
  CHECK(p.total == 1644414976LL);
  CHECK(preset.reported_params == 1644417024LL);
  CHECK(std::abs(p.total - preset.reported_params) < preset.reported_params / 10000);
  CHECK(p.total == p.embedding + preset.config.num_layers * p.per_layer + p.final_norm + p.head);
}

TEST_CASE("parameter count is linear in layers and vocabulary") {
  ArchConfig c;
  std::vector<std::int64_t> totals;
  for (std::int64_t l = 0; l <= 6; ++l) {
    c.num_layers = l;
    totals.push_back(param_count(c));
  }
  for (std::size_t i = 2; i < totals.size(); ++i) CHECK(totals[i] - totals[i - 1] == totals[1] - totals[0]);

  for (bool tied : {false, true}) {
    ArchConfig a;
    a.tied_embeddings = tied;
    ArchConfig b = a;
    b.vocab_size = 2 * a.vocab_size;
    CHECK(param_count(b) - param_count(a) == a.vocab_size * a.hidden_size * (tied ? 1 : 2));
  }
}

TEST_CASE("config validation") {
  ArchConfig c;
  c.num_heads = 30;
  CHECK_THROWS_AS(param_count(c), ptk::InvalidArgument);
  c = ArchConfig{};
  c.rotary_fraction = 0.3;  // 19.2 dims
  CHECK_THROWS_AS(c.validate(), ptk::InvalidArgument);
  c.rotary_fraction = 0.25;
  CHECK(c.rotary_dims() == 16);
}

TEST_CASE("flops per token") {
  const ArchConfig c;
  const auto f = flops_per_token(c, 4096);
  CHECK(f.attention == 12.0 * 24 * 2048 * 4096);
  CHECK(f.attention == 2415919104.0);
  CHECK(f.dense == 6.0 * static_cast<double>(param_count(c)));
  CHECK(f.total == f.dense + f.attention);
  CHECK(flops_per_token(c, 0).total == 6.0 * static_cast<double>(param_count(c)));

  const double base = f.total;
  auto grow = [&](auto mutate) {
    ArchConfig d;
    mutate(d);
    return flops_per_token(d, 4096).total > base;
  };
  CHECK(grow([](ArchConfig& d) { d.hidden_size = 4096; }));
  CHECK(grow([](ArchConfig& d) { d.num_layers = 25; }));
  CHECK(grow([](ArchConfig& d) { d.vocab_size += 64; }));
  CHECK(grow([](ArchConfig& d) { d.ffn_inner_size += 256; }));
  CHECK(flops_per_token(c, 4097).total > base);
}

TEST_CASE("model flops utilization") {
  CHECK(mfu(170, 312) == doctest::Approx(0.545).epsilon(0.002));
  CHECK(mfu(200, 312) == doctest::Approx(0.641).epsilon(0.002));
  CHECK(mfu(312, 312) == 1.0);
  CHECK(mfu(170) == mfu(170, 312));
  for (double x : {1.0, 17.5, 170.0, 311.0}) CHECK(mfu(x, 312) * 312 == doctest::Approx(x).epsilon(1e-15));
  CHECK_THROWS_AS(mfu(170, 0), ptk::InvalidArgument);
}

TEST_CASE("layout tokens") {
  CHECK(layout_tokens(ptk::presets::table3().layout) == 8388608);
  CHECK(layout_tokens({1, 1, 1, 1}) == 1);
  CHECK(layout_tokens({256, 2, 4, 4096}) == 8388608);
  std::array<std::int64_t, 4> f{512, 2, 2, 4096};
  std::sort(f.begin(), f.end());
  do {
    CHECK(layout_tokens({f[0], f[1], f[2], f[3]}) == 8388608);
  } while (std::next_permutation(f.begin(), f.end()));
  CHECK_THROWS_AS(layout_tokens({0, 1, 1, 1}), ptk::InvalidArgument);
}

TEST_CASE("carbon") {
  const auto est = carbon({92000, 296.4, 1.1, 0.385});
  CHECK(est.energy_mwh == doctest::Approx(29.99568).epsilon(1e-12));
  CHECK(est.emissions_t == doctest::Approx(11.5483368).epsilon(1e-9));
  CHECK(display_round(est.energy_mwh, 0) == 30.0);
  CHECK(display_round(est.emissions_t, 1) == 11.5);

  const auto from30 = carbon({30e6 / 1.1 / 296.4, 296.4, 1.1, 0.385});
  CHECK(from30.emissions_t == doctest::Approx(11.55).epsilon(1e-12));

  const auto zero = carbon({0, 296.4, 1.1, 0.385});
  CHECK(zero.energy_wh == 0.0);
  CHECK(zero.emissions_t == 0.0);

  const CarbonInput base{1000, 300, 1.2, 0.4};
  const double e = carbon(base).emissions_t;
  CHECK(carbon({2000, 300, 1.2, 0.4}).emissions_t == doctest::Approx(2 * e));
  CHECK(carbon({1000, 600, 1.2, 0.4}).emissions_t == doctest::Approx(2 * e));
  CHECK(carbon({1000, 300, 2.4, 0.4}).emissions_t == doctest::Approx(2 * e));
  CHECK(carbon({1000, 300, 1.2, 0.8}).emissions_t == doctest::Approx(2 * e));
  CHECK_THROWS_AS(carbon({1000, 300, 0.9, 0.4}), ptk::InvalidArgument);
}

TEST_CASE("search over the unknown grid") {
  const auto preset = ptk::presets::table2();
  const auto result = search_param_grid(preset.config, preset.reported_params);
  CHECK(result.grid_size == ffn_candidates(2048).size() * 8);
  CHECK_FALSE(result.exact);
  const auto& best = result.ranked.front();
  CHECK(best.params == 1644414976LL);
  CHECK(best.deviation == -2048);
  CHECK(best.config.ffn_inner_size == 5632);
  CHECK_FALSE(best.config.norm_bias);
  CHECK(best.config.final_norm);
  CHECK_FALSE(best.config.tied_embeddings);
  CHECK(param_count(preset.config) == best.params);
  for (std::size_t i = 1; i < result.ranked.size(); ++i) {
    CHECK(std::abs(result.ranked[i].deviation) >= std::abs(result.ranked[i - 1].deviation));
  }

  // a target the grid can hit is reported as exact
  auto probe = preset.config;
  probe.ffn_inner_size = 6144;
  probe.tied_embeddings = true;
  const auto hit = search_param_grid(preset.config, param_count(probe));
  CHECK(hit.exact);
  CHECK(hit.ranked.front().deviation == 0);
}

TEST_CASE("ffn candidates") {
  const auto c = ffn_candidates(2048);
  for (std::int64_t v : {2816LL, 5461LL, 5632LL, 6144LL, 8192LL}) {
    CHECK(std::find(c.begin(), c.end(), v) != c.end());
  }
  CHECK(std::is_sorted(c.begin(), c.end()));
}

TEST_CASE("arch json round trip") {
  const ArchConfig c;
  const nlohmann::json j = c;
  const auto back = j.get<ArchConfig>();
  CHECK(param_count(back) == param_count(c));
  CHECK(back.rotary_fraction == 0.25);
}

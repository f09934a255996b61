#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>

#include "ptk/error.hpp"
#include "ptk/needle.hpp"

// after Eigen: <resolv.h>, pulled in by httplib, defines a _res macro
#include <httplib.h>

using namespace ptk::needle;

namespace {

const std::string kNeedle = "The secret ingredient in the lighthouse keeper's soup is smoked paprika from Valencia.";

std::size_t occurrences(const std::string& text, const std::string& what) {
  std::size_t n = 0;
  for (auto at = text.find(what); at != std::string::npos; at = text.find(what, at + 1)) ++n;
  return n;
}

NeedleTask small_task() {
  NeedleTask t = default_task();
  t.depths = even_depths(5);
  t.context_sizes = {300, 600};
  t.runs = 3;
  return t;
}

/// A model that fails for one context size and otherwise answers correctly.
class FlakyModel final : public ModelClient {
 public:
  std::string answer(const std::string& context, const std::string&) override {
    if (context.size() > 2000) throw TransportError("connection reset");
    return "It is smoked paprika.";
  }
};

}  // namespace

TEST_CASE("token counter") {
  const TokenCounter c;
  CHECK(c.count("abcdefgh") == 2);
  CHECK(c.chars_for(500) == 2000);
  const TokenCounter three{3.0};
  CHECK(three.count(std::string(300, 'x')) == 100);
}

TEST_CASE("default task shape") {
  const auto t = default_task();
  CHECK(t.depths.size() == 35);
  CHECK(t.depths.front() == 0.0);
  CHECK(t.depths.back() == 1.0);
  CHECK(std::is_sorted(t.depths.begin(), t.depths.end()));
  CHECK(t.context_sizes.size() == 8);
  CHECK(t.context_sizes.front() == 500);
  CHECK(t.context_sizes.back() == 4000);
  CHECK(t.runs == 10);
  CHECK(t.answer_key() == "smoked paprika");
  CHECK_NOTHROW(t.validate());

  auto bad = t;
  bad.context_sizes.push_back(5000);
  CHECK_THROWS_AS(bad.validate(), ptk::InvalidArgument);
  bad = t;
  bad.depths = {0.5, 0.2};
  CHECK_THROWS_AS(bad.validate(), ptk::InvalidArgument);
}

TEST_CASE("haystack placement at the extremes") {
  const auto corpus = synthetic_corpus(16, 1);
  const auto top = build_haystack(corpus, 1000, kNeedle, 0.0, 3);
  CHECK(top.needle_offset == 0);
  CHECK(top.prompt.substr(0, kNeedle.size()) == kNeedle);
  const auto bottom = build_haystack(corpus, 1000, kNeedle, 1.0, 3);
  CHECK(bottom.needle_offset + bottom.needle_length == bottom.prompt.size());
}

TEST_CASE("haystack invariants over depths, sizes and seeds") {
  const auto corpus = synthetic_corpus(64, 2);
  const TokenCounter counter;
  for (std::int64_t target : {500, 1000, 2500, 4000}) {
    for (double depth : even_depths(35)) {
      for (std::uint64_t seed : {0ULL, 9ULL}) {
        const auto h = build_haystack(corpus, target, kNeedle, depth, seed);
        REQUIRE(occurrences(h.prompt, kNeedle) == 1);
        REQUIRE(h.prompt.compare(h.needle_offset, h.needle_length, kNeedle) == 0);
        REQUIRE(std::abs(static_cast<double>(counter.count(h.prompt) - target)) <= 0.02 * target);
        REQUIRE(h.tokens == counter.count(h.prompt));
        if (h.needle_offset > 0 && h.needle_offset + h.needle_length < h.prompt.size()) {
          REQUIRE(h.prompt[h.needle_offset - 1] == ' ');
          REQUIRE(h.prompt[h.needle_offset - 2] == '.');
        }
      }
    }
  }
}

TEST_CASE("needle position tracks depth") {
  const auto corpus = synthetic_corpus(32, 4);
  std::size_t last = 0;
  for (double depth : even_depths(11)) {
    const auto h = build_haystack(corpus, 2000, kNeedle, depth, 5);
    CHECK(h.needle_offset >= last);
    CHECK(std::abs(static_cast<double>(h.needle_offset) - depth * static_cast<double>(h.prompt.size() - kNeedle.size())) <
          400.0);
    last = h.needle_offset;
  }
}

TEST_CASE("haystacks are deterministic per seed") {
  const auto corpus = synthetic_corpus(32, 4);
  const auto a = build_haystack(corpus, 1500, kNeedle, 0.4, 77);
  const auto b = build_haystack(corpus, 1500, kNeedle, 0.4, 77);
  CHECK(a.prompt == b.prompt);
  CHECK(a.needle_offset == b.needle_offset);
  CHECK(build_haystack(corpus, 1500, kNeedle, 0.4, 78).prompt != a.prompt);
  CHECK(synthetic_corpus(3, 1) == synthetic_corpus(3, 1));
}

TEST_CASE("haystack errors") {
  const auto corpus = synthetic_corpus(1, 1, 5);
  CHECK_THROWS_AS(build_haystack(corpus, 4000, kNeedle, 0.5, 1), ptk::InvalidArgument);
  CHECK_THROWS_AS(build_haystack(synthetic_corpus(8, 1), 10, kNeedle, 0.5, 1), ptk::InvalidArgument);
  CHECK_THROWS_AS(build_haystack(synthetic_corpus(8, 1), 500, kNeedle, 1.5, 1), ptk::InvalidArgument);
  const std::vector<std::string> dup{kNeedle + " " + kNeedle + " Filler sentence. " + std::string(3000, 'a') + "."};
  CHECK_THROWS_AS(build_haystack(dup, 500, kNeedle, 0.5, 1), ptk::InvalidArgument);
}

TEST_CASE("prompt rendering") {
  CHECK(render_prompt("{context}\n\n{question}", "C", "Q?") == "C\n\nQ?");
  CHECK(render_prompt("Q: {question} / {context} / {question}", "ctx", "why") == "Q: why / ctx / why");
}

TEST_CASE("mock judge semantics") {
  MockJudge judge("smoked paprika");
  CHECK(judge.score({"q", "ref", "it is smoked paprika"}) == 10);
  CHECK(judge.score({"q", "ref", "saffron"}) == 1);
  CHECK(judge.score({"q", "ref", ""}) == 1);
  MockJudge by_reference;
  CHECK(by_reference.score({"q", "paprika", "Paprika? no: paprika"}) == 10);
}

TEST_CASE("oracle and empty models over the default grid") {
  const auto task = default_task();
  const auto corpus = synthetic_corpus(64, 0);
  OracleModel oracle(task.needle);
  MockJudge judge(task.answer_key());
  const auto grid = run_grid(task, corpus, oracle, judge, {8});
  CHECK(grid.scores.size() == 35 * 8 * 10);
  CHECK(std::all_of(grid.scores.begin(), grid.scores.end(), [](const auto& s) { return s == 10; }));
  const auto summary = aggregate(grid);
  CHECK(summary.mean.rows() == 35);
  CHECK(summary.mean.cols() == 8);
  CHECK((summary.mean.array() == 10.0).all());
  CHECK((summary.stddev.array() == 0.0).all());
  CHECK(summary.overall == 10.0);

  EmptyModel empty;
  const auto low = aggregate(run_grid(small_task(), corpus, empty, judge));
  CHECK((low.mean.array() == 1.0).all());
}

TEST_CASE("grid results do not depend on concurrency") {
  const auto task = small_task();
  const auto corpus = synthetic_corpus(16, 0);
  OracleModel oracle(task.needle);
  MockJudge judge(task.answer_key());
  const auto a = run_grid(task, corpus, oracle, judge, {1});
  const auto b = run_grid(task, corpus, oracle, judge, {16});
  CHECK(a.scores == b.scores);
  CHECK(grid_to_json(a, aggregate(a)) == grid_to_json(b, aggregate(b)));
}

TEST_CASE("transport failures are recorded per cell") {
  auto task = small_task();
  task.context_sizes = {300, 1000};
  const auto corpus = synthetic_corpus(16, 0);
  FlakyModel model;
  MockJudge judge(task.answer_key());
  const auto grid = run_grid(task, corpus, model, judge);
  CHECK(grid.missing() == 5 * 3);
  CHECK(grid.errors.size() == 15);
  CHECK(grid.errors.front().message.find("connection reset") != std::string::npos);
  // a cell with no surviving run cannot be summarised
  CHECK_THROWS_AS(aggregate(grid), ptk::ValidationFailure);

  NeedleGrid partial({0.0}, {500}, 3);
  partial.at(0, 0, 0) = 10;
  partial.at(2, 0, 0) = 4;
  const auto s = aggregate(partial);
  CHECK(s.missing == 1);
  CHECK(s.counts(0, 0) == 2);
  CHECK(s.mean(0, 0) == 7.0);
  CHECK(s.stddev(0, 0) == 3.0);
}

TEST_CASE("two-point statistics and run permutation") {
  NeedleGrid grid({0.0, 1.0}, {500, 1000}, 2);
  for (std::size_t d = 0; d < 2; ++d) {
    for (std::size_t c = 0; c < 2; ++c) {
      grid.at(0, d, c) = 10;
      grid.at(1, d, c) = 1;
    }
  }
  const auto s = aggregate(grid);
  CHECK((s.mean.array() == 5.5).all());
  CHECK((s.stddev.array() == 4.5).all());
  CHECK(s.overall == 5.5);

  NeedleGrid swapped = grid;
  for (std::size_t d = 0; d < 2; ++d) {
    for (std::size_t c = 0; c < 2; ++c) std::swap(swapped.at(0, d, c), swapped.at(1, d, c));
  }
  const auto t = aggregate(swapped);
  CHECK(t.mean == s.mean);
  CHECK(t.stddev == s.stddev);

  NeedleGrid hole({0.0}, {500}, 2);
  CHECK_THROWS(aggregate(hole));
}

TEST_CASE("csv summary layout") {
  NeedleGrid grid({0.0, 0.5}, {500, 1000}, 1);
  grid.at(0, 0, 0) = 10;
  grid.at(0, 0, 1) = 7;
  grid.at(0, 1, 0) = 1;
  grid.at(0, 1, 1) = 4;
  const auto csv = summary_to_csv(grid, aggregate(grid));
  CHECK(csv.rfind("statistic,depth,500,1000\n", 0) == 0);
  CHECK(csv.find("mean,0,10,7\n") != std::string::npos);
  CHECK(csv.find("mean,0.5,1,4\n") != std::string::npos);
  CHECK(csv.find("std,0,0,0\n") != std::string::npos);
}

TEST_CASE("judge wire format") {
  const auto j = to_json(JudgeRequest{"Q", "R", "A"});
  CHECK(j == nlohmann::json{{"question", "Q"}, {"reference_answer", "R"}, {"model_answer", "A"}});
  CHECK(parse_judge_response(R"({"score": 7})") == 7);
  CHECK_THROWS_AS(parse_judge_response(R"({"score": 11})"), TransportError);
  CHECK_THROWS_AS(parse_judge_response(R"({"score": 0})"), TransportError);
  CHECK_THROWS_AS(parse_judge_response(R"({"grade": 5})"), TransportError);
  CHECK_THROWS_AS(parse_judge_response("not json"), TransportError);
}

TEST_CASE("http clients against a local server") {
  httplib::Server server;
  std::atomic<int> model_calls{0};
  server.Post("/model", [&](const httplib::Request& req, httplib::Response& res) {
    ++model_calls;
    const auto body = nlohmann::json::parse(req.body);
    const std::string context = body.at("context");
    const std::string prompt = body.at("prompt");
    const bool has = context.find("smoked paprika") != std::string::npos && prompt.find(context) != std::string::npos;
    res.set_content(nlohmann::json{{"answer", has ? "smoked paprika" : "no idea"}}.dump(), "application/json");
  });
  server.Post("/judge", [&](const httplib::Request& req, httplib::Response& res) {
    const auto body = nlohmann::json::parse(req.body);
    const std::string answer = body.at("model_answer");
    const int score = answer.find("paprika") != std::string::npos ? 9 : 2;
    res.set_content(nlohmann::json{{"score", score}}.dump(), "application/json");
  });
  server.Post("/bad", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"score": 42})", "application/json");
  });
  server.Post("/down", [](const httplib::Request&, httplib::Response& res) { res.status = 503; });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread worker([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  const std::string base = "http://127.0.0.1:" + std::to_string(port);

  auto task = small_task();
  task.runs = 2;
  HttpModelClient model({base + "/model", std::chrono::milliseconds(5000)}, task.prompt_template);
  HttpJudgeClient judge({base + "/judge", std::chrono::milliseconds(5000)});
  const auto grid = run_grid(task, synthetic_corpus(16, 0), model, judge, {4});
  CHECK(grid.missing() == 0);
  CHECK(std::all_of(grid.scores.begin(), grid.scores.end(), [](const auto& s) { return s == 9; }));
  CHECK(model_calls.load() == 5 * 2 * 2);

  HttpJudgeClient bad({base + "/bad", std::chrono::milliseconds(5000)});
  CHECK_THROWS_AS(bad.score({"q", "r", "a"}), TransportError);
  HttpJudgeClient down({base + "/down", std::chrono::milliseconds(5000)});
  CHECK_THROWS_AS(down.score({"q", "r", "a"}), TransportError);
  const auto failed = run_grid(task, synthetic_corpus(16, 0), model, down);
  CHECK(failed.missing() == static_cast<std::int64_t>(failed.scores.size()));

  server.stop();
  worker.join();

  HttpJudgeClient refused({base + "/judge", std::chrono::milliseconds(500)});
  CHECK_THROWS_AS(refused.score({"q", "r", "a"}), TransportError);
  CHECK_THROWS_AS(HttpJudgeClient({"ftp://nowhere", std::chrono::milliseconds(10)}), ptk::InvalidArgument);
}

TEST_CASE("task json round trip") {
  const auto t = default_task();
  const nlohmann::json j = t;
  const auto back = j.get<NeedleTask>();
  CHECK(back.depths == t.depths);
  CHECK(back.context_sizes == t.context_sizes);
  CHECK(back.needle == t.needle);
  const auto compact = nlohmann::json::parse(R"({"needle":"N.","question":"Q","reference_answer":"R","depths":3,
                                                 "context_sizes":[100]})")
                           .get<NeedleTask>();
  CHECK(compact.depths == std::vector<double>{0.0, 0.5, 1.0});
}

#include "ptk/needle.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "ptk/error.hpp"
#include "ptk/random.hpp"

namespace ptk::needle {

std::int64_t TokenCounter::count(std::string_view text) const {
  return static_cast<std::int64_t>(std::llround(static_cast<double>(text.size()) / chars_per_token));
}

std::size_t TokenCounter::chars_for(std::int64_t tokens) const {
  return static_cast<std::size_t>(std::llround(static_cast<double>(tokens) * chars_per_token));
}

std::vector<double> even_depths(std::size_t count) {
  require(count >= 1, "at least one depth is required");
  std::vector<double> out(count, 0.0);
  if (count == 1) return out;
  for (std::size_t i = 0; i < count; ++i) out[i] = static_cast<double>(i) / static_cast<double>(count - 1);
  return out;
}

std::vector<std::int64_t> even_sizes(std::int64_t first, std::int64_t last, std::size_t count) {
  require(count >= 1 && first > 0 && last >= first, "invalid context size range");
  std::vector<std::int64_t> out(count, first);
  if (count == 1) return out;
  for (std::size_t i = 0; i < count; ++i) {
    out[i] = first + static_cast<std::int64_t>(std::llround(static_cast<double>(last - first) *
                                                            static_cast<double>(i) / static_cast<double>(count - 1)));
  }
  return out;
}

NeedleTask default_task() {
  NeedleTask t;
  t.needle = "The secret ingredient in the lighthouse keeper's soup is smoked paprika from Valencia.";
  t.question = "What is the secret ingredient in the lighthouse keeper's soup?";
  t.reference_answer = "smoked paprika from Valencia";
  t.key_span = "smoked paprika";
  t.depths = even_depths(35);
  t.context_sizes = even_sizes(500, 4000, 8);
  t.runs = 10;
  t.seed = 0;
  return t;
}

void NeedleTask::validate() const {
  require(!needle.empty(), "needle is empty");
  require(!question.empty(), "question is empty");
  require(!answer_key().empty(), "reference answer is empty");
  require(!depths.empty(), "no depths given");
  require(std::is_sorted(depths.begin(), depths.end()), "depths must be sorted");
  for (const double d : depths) require(d >= 0.0 && d <= 1.0, "depths must lie in [0, 1]");
  require(!context_sizes.empty(), "no context sizes given");
  for (const auto c : context_sizes) {
    require(c > 0 && c <= max_context, "context sizes must lie in (0, " + std::to_string(max_context) + "]");
  }
  require(runs >= 1, "runs must be positive");
  require(chars_per_token > 0.0, "chars_per_token must be positive");
}

namespace {

std::size_t count_occurrences(std::string_view haystack, std::string_view needle) {
  std::size_t n = 0;
  for (std::size_t pos = haystack.find(needle); pos != std::string_view::npos; pos = haystack.find(needle, pos + 1)) ++n;
  return n;
}

bool ends_sentence(char c) { return c == '.' || c == '!' || c == '?'; }

}  // namespace

Haystack build_haystack(std::span<const std::string> corpus, std::int64_t target_tokens, std::string_view needle,
                        double depth, std::uint64_t seed, const TokenCounter& counter) {
  require(target_tokens > 0, "target_tokens must be positive");
  require(depth >= 0.0 && depth <= 1.0, "depth must lie in [0, 1]");
  require(!needle.empty(), "needle is empty");
  const std::size_t target_chars = counter.chars_for(target_tokens);
  require(needle.size() + 1 <= target_chars, "needle is longer than the target context");
  const std::size_t filler_chars = target_chars - needle.size() - 1;

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  random::SplitMix64 rng(random::derive_seed({seed, 0x686179ULL}));
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  std::string filler;
  filler.reserve(filler_chars + 1024);
  for (const std::size_t doc : order) {
    if (filler.size() >= filler_chars) break;
    if (!filler.empty()) filler.push_back(' ');
    filler += corpus[doc];
  }
  require(filler.size() >= filler_chars, "corpus is too small for " + std::to_string(target_tokens) + " tokens");
  filler.resize(filler_chars);

  // Candidate insertion points: both ends and every sentence end followed by a space.
  const auto want = static_cast<std::size_t>(std::llround(depth * static_cast<double>(filler.size())));
  std::size_t best = 0;
  std::size_t best_gap = want;
  auto consider = [&](std::size_t b) {
    const std::size_t gap = b > want ? b - want : want - b;
    if (gap < best_gap) {
      best = b;
      best_gap = gap;
    }
  };
  for (std::size_t i = 0; i + 1 < filler.size(); ++i) {
    if (ends_sentence(filler[i]) && filler[i + 1] == ' ') consider(i + 1);
  }
  consider(filler.size());

  Haystack out;
  out.needle_length = needle.size();
  out.prompt.reserve(target_chars);
  if (best == 0) {
    out.needle_offset = 0;
    out.prompt.append(needle).append(" ").append(filler);
  } else {
    out.prompt.append(filler, 0, best).append(" ");
    out.needle_offset = out.prompt.size();
    out.prompt.append(needle).append(filler, best, std::string::npos);
  }
  require(count_occurrences(out.prompt, needle) == 1, "needle text also occurs in the filler corpus");
  out.tokens = counter.count(out.prompt);
  return out;
}

std::vector<std::string> synthetic_corpus(std::size_t documents, std::uint64_t seed, std::size_t sentences_per_document) {
  static constexpr std::array<std::string_view, 12> kSubjects = {
      "the committee", "a small startup", "our neighbour", "the old library", "every student", "the river town",
      "a careful reader", "the night train", "most engineers", "the museum guide", "a travelling painter",
      "the village baker"};
  static constexpr std::array<std::string_view, 12> kVerbs = {
      "considered", "rebuilt", "wrote about", "ignored", "measured", "described", "questioned", "borrowed",
      "remembered", "organised", "explained", "compared"};
  static constexpr std::array<std::string_view, 14> kObjects = {
      "the quarterly plan", "an unfinished bridge", "the weather in spring", "a list of old maps",
      "the price of copper", "a forgotten recipe", "the harbour lights", "several long letters",
      "the rules of chess", "a broken clock", "the colour of the hills", "an early draft",
      "the shape of the coast", "a box of photographs"};
  static constexpr std::array<std::string_view, 10> kTails = {
      "before the holidays", "without much fuss", "for the third time", "in great detail", "after a long debate",
      "with some hesitation", "during the evening", "against all advice", "over several weeks", "at the last minute"};

  random::SplitMix64 rng(random::derive_seed({seed, 0x636f7270ULL}));
  std::vector<std::string> docs;
  docs.reserve(documents);
  for (std::size_t d = 0; d < documents; ++d) {
    std::string text;
    for (std::size_t s = 0; s < sentences_per_document; ++s) {
      std::string sentence;
      sentence += kSubjects[rng.below(kSubjects.size())];
      sentence += ' ';
      sentence += kVerbs[rng.below(kVerbs.size())];
      sentence += ' ';
      sentence += kObjects[rng.below(kObjects.size())];
      sentence += ' ';
      sentence += kTails[rng.below(kTails.size())];
      sentence += '.';
      sentence[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(sentence[0])));
      if (!text.empty()) text += ' ';
      text += sentence;
    }
    docs.push_back(std::move(text));
  }
  return docs;
}

std::string render_prompt(std::string_view tmpl, std::string_view context, std::string_view question) {
  std::string out;
  out.reserve(tmpl.size() + context.size() + question.size());
  for (std::size_t i = 0; i < tmpl.size();) {
    if (tmpl.substr(i, 9) == "{context}") {
      out.append(context);
      i += 9;
    } else if (tmpl.substr(i, 10) == "{question}") {
      out.append(question);
      i += 10;
    } else {
      out.push_back(tmpl[i++]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

int MockJudge::score(const JudgeRequest& request) {
  const std::string& key = key_.empty() ? request.reference_answer : key_;
  return request.model_answer.find(key) != std::string::npos ? 10 : 1;
}

namespace {

struct ParsedUrl {
  std::string origin;  ///< scheme://host[:port]
  std::string path;
};

ParsedUrl parse_url(const std::string& url) {
  constexpr std::string_view kScheme = "http://";
  require(url.starts_with(kScheme) && url.size() > kScheme.size(), "endpoint must be an http:// URL: " + url);
  const std::size_t slash = url.find('/', kScheme.size());
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

nlohmann::json post_json(const Endpoint& endpoint, const nlohmann::json& body) {
  const ParsedUrl url = parse_url(endpoint.url);
  httplib::Client client(url.origin);
  const auto seconds = std::chrono::duration_cast<std::chrono::seconds>(endpoint.timeout);
  const auto micros = std::chrono::duration_cast<std::chrono::microseconds>(endpoint.timeout - seconds);
  client.set_connection_timeout(static_cast<time_t>(seconds.count()), static_cast<time_t>(micros.count()));
  client.set_read_timeout(static_cast<time_t>(seconds.count()), static_cast<time_t>(micros.count()));
  client.set_write_timeout(static_cast<time_t>(seconds.count()), static_cast<time_t>(micros.count()));
  const auto res = client.Post(url.path, body.dump(), "application/json");
  if (!res) throw TransportError(endpoint.url + ": " + httplib::to_string(res.error()));
  if (res->status != 200) throw TransportError(endpoint.url + ": HTTP " + std::to_string(res->status));
  try {
    return nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception& e) {
    throw TransportError(endpoint.url + ": malformed response: " + e.what());
  }
}

}  // namespace

HttpModelClient::HttpModelClient(Endpoint endpoint, std::string prompt_template)
    : endpoint_(std::move(endpoint)), template_(std::move(prompt_template)) {
  parse_url(endpoint_.url);
}

std::string HttpModelClient::answer(const std::string& context, const std::string& question) {
  const nlohmann::json body = {
      {"prompt", render_prompt(template_, context, question)}, {"context", context}, {"question", question}};
  const nlohmann::json reply = post_json(endpoint_, body);
  if (!reply.is_object() || !reply.contains("answer") || !reply["answer"].is_string()) {
    throw TransportError(endpoint_.url + ": response lacks a string 'answer'");
  }
  return reply["answer"].get<std::string>();
}

HttpJudgeClient::HttpJudgeClient(Endpoint endpoint) : endpoint_(std::move(endpoint)) { parse_url(endpoint_.url); }

nlohmann::json to_json(const JudgeRequest& request) {
  return {{"question", request.question},
          {"reference_answer", request.reference_answer},
          {"model_answer", request.model_answer}};
}

int parse_judge_response(const std::string& body) {
  nlohmann::json reply;
  try {
    reply = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw TransportError(std::string("malformed judge response: ") + e.what());
  }
  if (!reply.is_object() || !reply.contains("score") || !reply["score"].is_number_integer()) {
    throw TransportError("judge response lacks an integer 'score'");
  }
  const int score = reply["score"].get<int>();
  if (score < 1 || score > 10) throw TransportError("judge score " + std::to_string(score) + " outside [1, 10]");
  return score;
}

int HttpJudgeClient::score(const JudgeRequest& request) {
  return parse_judge_response(post_json(endpoint_, to_json(request)).dump());
}

// ---------------------------------------------------------------------------

NeedleGrid::NeedleGrid(std::vector<double> d, std::vector<std::int64_t> c, std::int64_t r)
    : depths(std::move(d)), context_sizes(std::move(c)), runs(r) {
  scores.assign(static_cast<std::size_t>(runs) * depths.size() * context_sizes.size(), std::nullopt);
}

std::size_t NeedleGrid::index(std::int64_t run, std::size_t depth, std::size_t context) const {
  return (static_cast<std::size_t>(run) * depths.size() + depth) * context_sizes.size() + context;
}

std::optional<int>& NeedleGrid::at(std::int64_t run, std::size_t depth, std::size_t context) {
  return scores.at(index(run, depth, context));
}

const std::optional<int>& NeedleGrid::at(std::int64_t run, std::size_t depth, std::size_t context) const {
  return scores.at(index(run, depth, context));
}

std::int64_t NeedleGrid::missing() const {
  return static_cast<std::int64_t>(std::count(scores.begin(), scores.end(), std::nullopt));
}

std::uint64_t run_seed(std::uint64_t task_seed, std::int64_t run) {
  return random::derive_seed({task_seed, static_cast<std::uint64_t>(run)});
}

NeedleGrid run_grid(const NeedleTask& task, std::span<const std::string> corpus, ModelClient& model,
                    JudgeClient& judge, const RunOptions& options) {
  task.validate();
  const TokenCounter counter{task.chars_per_token};
  NeedleGrid grid(task.depths, task.context_sizes, task.runs);
  // Fail fast on corpus or needle problems before any client traffic.
  build_haystack(corpus, *std::max_element(task.context_sizes.begin(), task.context_sizes.end()), task.needle, 0.5,
                 run_seed(task.seed, 0), counter);

  const std::size_t cells = grid.scores.size();
  const std::size_t per_run = task.depths.size() * task.context_sizes.size();
  std::atomic<std::size_t> next{0};
  std::mutex errors_mutex;

  auto worker = [&] {
    for (std::size_t cell = next++; cell < cells; cell = next++) {
      const auto run = static_cast<std::int64_t>(cell / per_run);
      const std::size_t depth = (cell % per_run) / task.context_sizes.size();
      const std::size_t context = cell % task.context_sizes.size();
      const Haystack hay = build_haystack(corpus, task.context_sizes[context], task.needle, task.depths[depth],
                                          run_seed(task.seed, run), counter);
      try {
        JudgeRequest req{task.question, task.reference_answer, model.answer(hay.prompt, task.question)};
        const int score = judge.score(req);
        if (score < 1 || score > 10) throw TransportError("judge score outside [1, 10]");
        grid.scores[cell] = score;
      } catch (const std::exception& e) {
        const std::lock_guard lock(errors_mutex);
        grid.errors.push_back({run, depth, context, e.what()});
      }
    }
  };

  const unsigned threads = std::max(1u, std::min<unsigned>(options.max_in_flight, static_cast<unsigned>(cells)));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> team;
    for (unsigned i = 0; i < threads; ++i) team.emplace_back(worker);
  }
  std::sort(grid.errors.begin(), grid.errors.end(), [](const CellError& a, const CellError& b) {
    return std::tie(a.run, a.depth, a.context) < std::tie(b.run, b.depth, b.context);
  });
  return grid;
}

GridSummary aggregate(const NeedleGrid& grid) {
  const auto nd = static_cast<Eigen::Index>(grid.depths.size());
  const auto nc = static_cast<Eigen::Index>(grid.context_sizes.size());
  require(grid.runs >= 1 && nd > 0 && nc > 0, "grid is empty");
  GridSummary s;
  s.mean = Eigen::MatrixXd::Zero(nd, nc);
  s.stddev = Eigen::MatrixXd::Zero(nd, nc);
  s.counts = Eigen::MatrixXi::Zero(nd, nc);
  s.missing = grid.missing();

  for (Eigen::Index d = 0; d < nd; ++d) {
    for (Eigen::Index c = 0; c < nc; ++c) {
      double sum = 0.0;
      int n = 0;
      for (std::int64_t r = 0; r < grid.runs; ++r) {
        const auto& v = grid.at(r, static_cast<std::size_t>(d), static_cast<std::size_t>(c));
        if (v) {
          sum += *v;
          ++n;
        }
      }
      if (n == 0) {
        const auto depth = grid.depths[static_cast<std::size_t>(d)];
        const auto context = grid.context_sizes[static_cast<std::size_t>(c)];
        throw ValidationFailure("every run failed at depth " + std::to_string(depth) + ", context " +
                                std::to_string(context));
      }
      const double mean = sum / n;
      double sq = 0.0;
      for (std::int64_t r = 0; r < grid.runs; ++r) {
        const auto& v = grid.at(r, static_cast<std::size_t>(d), static_cast<std::size_t>(c));
        if (v) sq += (*v - mean) * (*v - mean);
      }
      s.mean(d, c) = mean;
      s.stddev(d, c) = std::sqrt(sq / n);
      s.counts(d, c) = n;
    }
  }
  s.overall = s.mean.mean();
  return s;
}

void from_json(const nlohmann::json& j, NeedleTask& t) {
  t = default_task();
  t.needle = j.value("needle", t.needle);
  t.question = j.value("question", t.question);
  t.reference_answer = j.value("reference_answer", t.reference_answer);
  t.key_span = j.value("key_span", j.contains("reference_answer") ? std::string{} : t.key_span);
  if (j.contains("depths")) {
    if (j["depths"].is_number_integer()) {
      t.depths = even_depths(j["depths"].get<std::size_t>());
    } else {
      j["depths"].get_to(t.depths);
    }
  }
  if (j.contains("context_sizes")) j["context_sizes"].get_to(t.context_sizes);
  t.runs = j.value("runs", t.runs);
  t.seed = j.value("seed", t.seed);
  t.prompt_template = j.value("prompt_template", t.prompt_template);
  t.chars_per_token = j.value("chars_per_token", t.chars_per_token);
  t.max_context = j.value("max_context", t.max_context);
  t.validate();
}

void to_json(nlohmann::json& j, const NeedleTask& t) {
  j = nlohmann::json{{"needle", t.needle},
                     {"question", t.question},
                     {"reference_answer", t.reference_answer},
                     {"key_span", t.key_span},
                     {"depths", t.depths},
                     {"context_sizes", t.context_sizes},
                     {"runs", t.runs},
                     {"seed", t.seed},
                     {"prompt_template", t.prompt_template},
                     {"chars_per_token", t.chars_per_token},
                     {"max_context", t.max_context}};
}

namespace {

nlohmann::json matrix_json(const Eigen::MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

nlohmann::json grid_to_json(const NeedleGrid& grid, const GridSummary& summary) {
  nlohmann::json scores = nlohmann::json::array();
  for (std::int64_t r = 0; r < grid.runs; ++r) {
    nlohmann::json run = nlohmann::json::array();
    for (std::size_t d = 0; d < grid.depths.size(); ++d) {
      nlohmann::json row = nlohmann::json::array();
      for (std::size_t c = 0; c < grid.context_sizes.size(); ++c) {
        const auto& v = grid.at(r, d, c);
        row.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
      }
      run.push_back(std::move(row));
    }
    scores.push_back(std::move(run));
  }
  nlohmann::json errors = nlohmann::json::array();
  for (const auto& e : grid.errors) {
    errors.push_back({{"run", e.run}, {"depth", e.depth}, {"context", e.context}, {"message", e.message}});
  }
  return {{"depths", grid.depths},
          {"context_sizes", grid.context_sizes},
          {"runs", grid.runs},
          {"scores", std::move(scores)},
          {"mean", matrix_json(summary.mean)},
          {"std", matrix_json(summary.stddev)},
          {"overall_average", summary.overall},
          {"missing", summary.missing},
          {"errors", std::move(errors)}};
}

std::string summary_to_csv(const NeedleGrid& grid, const GridSummary& summary) {
  std::ostringstream os;
  os.precision(17);
  os << "statistic,depth";
  for (const auto c : grid.context_sizes) os << ',' << c;
  os << '\n';
  for (const auto& [label, m] : {std::pair{"mean", &summary.mean}, std::pair{"std", &summary.stddev}}) {
    for (Eigen::Index d = 0; d < m->rows(); ++d) {
      os << label << ',' << grid.depths[static_cast<std::size_t>(d)];
      for (Eigen::Index c = 0; c < m->cols(); ++c) os << ',' << (*m)(d, c);
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace ptk::needle

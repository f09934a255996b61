#pragma once

// Needle-in-a-haystack harness: seeded haystack construction at controlled
// depths and lengths, pluggable model and judge clients, and per-cell
// aggregation across repeated runs.

#include <chrono>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

namespace ptk::needle {

/// Approximate token counter: characters / chars_per_token, rounded.
struct TokenCounter {
  double chars_per_token = 4.0;

  std::int64_t count(std::string_view text) const;
  std::size_t chars_for(std::int64_t tokens) const;
};

struct NeedleTask {
  std::string needle;
  std::string question;
  std::string reference_answer;
  std::string key_span;  ///< substring a correct answer must contain; defaults to reference_answer
  std::vector<double> depths;
  std::vector<std::int64_t> context_sizes;
  std::int64_t runs = 10;
  std::uint64_t seed = 0;
  std::string prompt_template = "{context}\n\n{question}";
  double chars_per_token = 4.0;
  std::int64_t max_context = 4096;

  const std::string& answer_key() const noexcept { return key_span.empty() ? reference_answer : key_span; }
  void validate() const;
};

/// 35 evenly spaced depths over [0, 1] and 8 sizes from 500 to 4000 tokens, 10 runs.
NeedleTask default_task();
std::vector<double> even_depths(std::size_t count);
std::vector<std::int64_t> even_sizes(std::int64_t first, std::int64_t last, std::size_t count);

struct Haystack {
  std::string prompt;
  std::size_t needle_offset = 0;
  std::size_t needle_length = 0;
  std::int64_t tokens = 0;
};

/// Shuffles `corpus` with `seed`, fills to target_tokens minus the needle,
/// and inserts the needle at the sentence boundary nearest depth * length.
Haystack build_haystack(std::span<const std::string> corpus, std::int64_t target_tokens, std::string_view needle,
                        double depth, std::uint64_t seed, const TokenCounter& counter = {});

/// Deterministic filler essays for offline runs.
std::vector<std::string> synthetic_corpus(std::size_t documents, std::uint64_t seed,
                                          std::size_t sentences_per_document = 40);

std::string render_prompt(std::string_view tmpl, std::string_view context, std::string_view question);

// ---------------------------------------------------------------------------
// Clients

class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ModelClient {
 public:
  virtual ~ModelClient() = default;
  /// Must be safe to call concurrently.
  virtual std::string answer(const std::string& context, const std::string& question) = 0;
};

struct JudgeRequest {
  std::string question;
  std::string reference_answer;
  std::string model_answer;
};

class JudgeClient {
 public:
  virtual ~JudgeClient() = default;
  /// Returns a score in [1, 10]. Must be safe to call concurrently.
  virtual int score(const JudgeRequest& request) = 0;
};

/// Answers with the needle verbatim.
class OracleModel final : public ModelClient {
 public:
  explicit OracleModel(std::string needle) : needle_(std::move(needle)) {}
  std::string answer(const std::string&, const std::string&) override { return needle_; }

 private:
  std::string needle_;
};

class EmptyModel final : public ModelClient {
 public:
  std::string answer(const std::string&, const std::string&) override { return {}; }
};

/// 10 when the key span occurs in the model answer, else 1. Without an
/// explicit key the request's reference answer is the key.
class MockJudge final : public JudgeClient {
 public:
  MockJudge() = default;
  explicit MockJudge(std::string key_span) : key_(std::move(key_span)) {}
  int score(const JudgeRequest& request) override;

 private:
  std::string key_;
};

struct Endpoint {
  std::string url;  ///< http://host[:port]/path
  std::chrono::milliseconds timeout{30000};
};

/// POSTs {"prompt", "context", "question"}; expects {"answer": string}.
class HttpModelClient final : public ModelClient {
 public:
  HttpModelClient(Endpoint endpoint, std::string prompt_template);
  std::string answer(const std::string& context, const std::string& question) override;

 private:
  Endpoint endpoint_;
  std::string template_;
};

/// POSTs {"question", "reference_answer", "model_answer"}; expects {"score": 1..10}.
class HttpJudgeClient final : public JudgeClient {
 public:
  explicit HttpJudgeClient(Endpoint endpoint);
  int score(const JudgeRequest& request) override;

 private:
  Endpoint endpoint_;
};

nlohmann::json to_json(const JudgeRequest& request);

/// Parses a judge response body, rejecting scores outside [1, 10].
int parse_judge_response(const std::string& body);

// ---------------------------------------------------------------------------
// Grid

struct CellError {
  std::int64_t run = 0;
  std::size_t depth = 0;
  std::size_t context = 0;
  std::string message;
};

struct NeedleGrid {
  std::vector<double> depths;
  std::vector<std::int64_t> context_sizes;
  std::int64_t runs = 0;
  /// Indexed [run][depth][context], flattened; empty optional = failed cell.
  std::vector<std::optional<int>> scores;
  std::vector<CellError> errors;

  NeedleGrid() = default;
  NeedleGrid(std::vector<double> d, std::vector<std::int64_t> c, std::int64_t r);

  std::size_t index(std::int64_t run, std::size_t depth, std::size_t context) const;
  std::optional<int>& at(std::int64_t run, std::size_t depth, std::size_t context);
  const std::optional<int>& at(std::int64_t run, std::size_t depth, std::size_t context) const;
  std::int64_t missing() const;
};

struct RunOptions {
  unsigned max_in_flight = 4;
};

/// Seed of the haystack shuffle for one run.
std::uint64_t run_seed(std::uint64_t task_seed, std::int64_t run);

NeedleGrid run_grid(const NeedleTask& task, std::span<const std::string> corpus, ModelClient& model,
                    JudgeClient& judge, const RunOptions& options = {});

struct GridSummary {
  Eigen::MatrixXd mean;  ///< depth x context
  Eigen::MatrixXd stddev;  ///< population standard deviation across runs
  Eigen::MatrixXi counts;
  double overall = 0.0;
  std::int64_t missing = 0;
};

/// Throws ValidationFailure when some cell has no surviving run.
GridSummary aggregate(const NeedleGrid& grid);

void from_json(const nlohmann::json& j, NeedleTask& t);
void to_json(nlohmann::json& j, const NeedleTask& t);
nlohmann::json grid_to_json(const NeedleGrid& grid, const GridSummary& summary);
std::string summary_to_csv(const NeedleGrid& grid, const GridSummary& summary);

}  // namespace ptk::needle

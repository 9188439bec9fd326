#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "taskweave/error.hpp"

namespace taskweave {

using Embedding = std::vector<double>;

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    /// Unit-norm vector; identical text gives an identical vector.
    virtual Embedding embed(std::string_view text) const = 0;
    virtual std::size_t dimension() const = 0;
    virtual std::string kind() const = 0;
};

/// Token -> FNV-1a bucket counts, L2-normalized. Stable across processes.
class HashedBowEmbedder final : public EmbeddingProvider {
public:
    explicit HashedBowEmbedder(std::size_t dimension = 512) : dimension_(dimension) {}
    Embedding embed(std::string_view text) const override;
    std::size_t dimension() const override { return dimension_; }
    std::string kind() const override { return "hashed_bow"; }

private:
    std::size_t dimension_;
};

/// POST {base_url}{path} with {model, input}; reads data[0].embedding.
class HttpEmbedder final : public EmbeddingProvider {
public:
    HttpEmbedder(std::string base_url, std::string model, std::size_t dimension, std::string api_key_env = "TASKWEAVE_API_KEY",
                 std::string path = "/v1/embeddings");
    Embedding embed(std::string_view text) const override;
    std::size_t dimension() const override { return dimension_; }
    std::string kind() const override { return "http"; }

private:
    std::string base_url_;
    std::string model_;
    std::size_t dimension_;
    std::string api_key_env_;
    std::string path_;
};

void normalize_l2(Embedding& v);
double cosine(const Embedding& a, const Embedding& b);

enum class Outcome { Success, Failure };

struct ExperienceRecord {
    std::string id;
    std::string task_description;
    std::string final_code;
    std::string final_answer;
    Outcome outcome = Outcome::Success;
    std::string created_at;
    Embedding embedding;
};

nlohmann::json to_json(const ExperienceRecord& record);
ExperienceRecord experience_from_json(const nlohmann::json& doc);

struct RetrievedExperience {
    ExperienceRecord record;
    double similarity = 0.0;
};

/// Append-only JSONL archive with an in-memory index rebuilt on open. An
/// empty path keeps the pool in memory only.
class ExperiencePool {
public:
    explicit ExperiencePool(std::filesystem::path path = {},
                            std::shared_ptr<const EmbeddingProvider> embedder = std::make_shared<HashedBowEmbedder>());

    /// Embeds and persists; returns the new id. Throws PreconditionViolation
    /// for an empty description, StorageFailure when the file cannot be written.
    std::string store(ExperienceRecord record);

    /// Top-k by cosine similarity, most similar first; ties go to the newer record.
    std::vector<RetrievedExperience> retrieve(std::string_view query, std::size_t k) const;

    std::size_t size() const;
    std::vector<ExperienceRecord> records() const;
    const std::filesystem::path& path() const noexcept { return path_; }

private:
    std::filesystem::path path_;
    std::shared_ptr<const EmbeddingProvider> embedder_;
    mutable std::shared_mutex mutex_;
    std::vector<ExperienceRecord> records_;
};

inline constexpr std::size_t kDefaultExperienceK = 3;

/// Delimited blocks of description, outcome, answer and code; code is cut to
/// fit `budget` characters overall.
std::string format_context(const std::vector<RetrievedExperience>& results, std::size_t budget = 4000);

}  // namespace taskweave

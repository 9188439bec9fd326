#include "taskweave/experience_pool.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <httplib.h>

#include "taskweave/text.hpp"

namespace taskweave {

using nlohmann::json;

namespace {

std::uint64_t fnv1a(std::string_view text) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string utc_now() {
    auto now = std::chrono::system_clock::now();
    std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

class FileLock {
public:
    explicit FileLock(const std::filesystem::path& target) {
        fd_ = ::open((target.string() + ".lock").c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
        if (fd_ >= 0) flock(fd_, LOCK_EX);
    }
    ~FileLock() {
        if (fd_ >= 0) {
            flock(fd_, LOCK_UN);
            ::close(fd_);
        }
    }
    FileLock(const FileLock&) = delete;
    FileLock& operator=(const FileLock&) = delete;
    bool held() const noexcept { return fd_ >= 0; }

private:
    int fd_ = -1;
};

std::vector<ExperienceRecord> read_pool(const std::filesystem::path& path) {
    std::vector<ExperienceRecord> records;
    std::ifstream in(path);
    if (!in) return records;
    std::string line;
    while (std::getline(in, line)) {
        if (trim(line).empty()) continue;
        json doc = json::parse(line, nullptr, false);
        if (doc.is_discarded()) continue;  // torn tail from an interrupted append
        records.push_back(experience_from_json(doc));
    }
    return records;
}

}  // namespace

void normalize_l2(Embedding& v) {
    double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (norm == 0.0) return;
    for (auto& x : v) x /= norm;
}

double cosine(const Embedding& a, const Embedding& b) {
    if (a.size() != b.size()) throw Error(ErrorCode::DomainError, "embedding dimensions differ");
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

Embedding HashedBowEmbedder::embed(std::string_view text) const {
    Embedding v(dimension_, 0.0);
    auto tokens = word_tokens(text);
    if (tokens.empty()) {
        // Punctuation-only text still needs a unit vector.
        std::string whole(trim(text));
        tokens.push_back(whole);
    }
    for (const auto& token : tokens) v[fnv1a(token) % dimension_] += 1.0;
    normalize_l2(v);
    return v;
}

HttpEmbedder::HttpEmbedder(std::string base_url, std::string model, std::size_t dimension, std::string api_key_env,
                           std::string path)
    : base_url_(std::move(base_url)),
      model_(std::move(model)),
      dimension_(dimension),
      api_key_env_(std::move(api_key_env)),
      path_(std::move(path)) {}

Embedding HttpEmbedder::embed(std::string_view text) const {
    httplib::Client client(base_url_);
    httplib::Headers headers;
    if (const char* token = std::getenv(api_key_env_.c_str()); token != nullptr && *token != '\0') {
        headers.emplace("Authorization", std::string("Bearer ") + token);
    }
    json body{{"model", model_}, {"input", std::string(text)}};
    auto res = client.Post(path_, headers, body.dump(), "application/json");
    if (!res) throw Error(ErrorCode::TransportError, "embedding request failed: " + httplib::to_string(res.error()));
    if (res->status != 200) throw Error(ErrorCode::TransportError, "embedding HTTP " + std::to_string(res->status));
    json doc = json::parse(res->body, nullptr, false);
    try {
        Embedding v = doc.at("data").at(0).at("embedding").get<Embedding>();
        if (v.size() != dimension_) throw Error(ErrorCode::TransportError, "embedding has unexpected dimension");
        normalize_l2(v);
        return v;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::TransportError, std::string("unexpected embedding reply: ") + e.what());
    }
}

json to_json(const ExperienceRecord& record) {
    return {{"id", record.id},
            {"task_description", record.task_description},
            {"final_code", record.final_code},
            {"final_answer", record.final_answer},
            {"outcome", record.outcome == Outcome::Success ? "success" : "failure"},
            {"created_at", record.created_at},
            {"embedding", record.embedding}};
}

ExperienceRecord experience_from_json(const json& doc) {
    ExperienceRecord r;
    r.id = doc.value("id", "");
    r.task_description = doc.value("task_description", "");
    r.final_code = doc.value("final_code", "");
    r.final_answer = doc.value("final_answer", "");
    r.outcome = doc.value("outcome", "success") == "failure" ? Outcome::Failure : Outcome::Success;
    r.created_at = doc.value("created_at", "");
    if (doc.contains("embedding")) r.embedding = doc.at("embedding").get<Embedding>();
    return r;
}

ExperiencePool::ExperiencePool(std::filesystem::path path, std::shared_ptr<const EmbeddingProvider> embedder)
    : path_(std::move(path)), embedder_(std::move(embedder)) {
    if (!path_.empty()) records_ = read_pool(path_);
}

std::string ExperiencePool::store(ExperienceRecord record) {
    if (trim(record.task_description).empty()) {
        throw Error(ErrorCode::PreconditionViolation, "experience needs a task description");
    }
    record.embedding = embedder_->embed(record.task_description);
    if (record.created_at.empty()) record.created_at = utc_now();

    std::unique_lock lock(mutex_);
    if (path_.empty()) {
        record.id = "exp-" + std::to_string(records_.size() + 1);
        records_.push_back(record);
        return record.id;
    }

    std::error_code ec;
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path(), ec);
    FileLock file_lock(path_);
    if (!file_lock.held()) throw Error(ErrorCode::StorageFailure, "cannot lock " + path_.string());
    // Another process may have appended since we loaded.
    records_ = read_pool(path_);
    record.id = "exp-" + std::to_string(records_.size() + 1);
    std::ofstream out(path_, std::ios::app);
    out << to_json(record).dump() << '\n';
    out.flush();
    if (!out) throw Error(ErrorCode::StorageFailure, "cannot append to " + path_.string());
    records_.push_back(record);
    return record.id;
}

std::vector<RetrievedExperience> ExperiencePool::retrieve(std::string_view query, std::size_t k) const {
    if (k == 0) return {};
    Embedding q = embedder_->embed(query);
    std::shared_lock lock(mutex_);
    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(records_.size());
    for (std::size_t i = 0; i < records_.size(); ++i) {
        if (records_[i].embedding.size() != q.size()) continue;
        scored.emplace_back(cosine(q, records_[i].embedding), i);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second > b.second;
    });
    std::vector<RetrievedExperience> out;
    for (std::size_t i = 0; i < scored.size() && i < k; ++i) out.push_back({records_[scored[i].second], scored[i].first});
    return out;
}

std::size_t ExperiencePool::size() const {
    std::shared_lock lock(mutex_);
    return records_.size();
}

std::vector<ExperienceRecord> ExperiencePool::records() const {
    std::shared_lock lock(mutex_);
    return records_;
}

std::string format_context(const std::vector<RetrievedExperience>& results, std::size_t budget) {
    if (results.empty()) return {};
    static constexpr std::string_view marker = "\n# ... [truncated]";
    std::string out;
    for (std::size_t i = 0; i < results.size(); ++i) {
        const auto& r = results[i].record;
        char sim[32];
        std::snprintf(sim, sizeof sim, "%.3f", results[i].similarity);
        std::string head = "### Experience " + std::to_string(i + 1) + " (outcome: " +
                           (r.outcome == Outcome::Success ? "success" : "failure") + ", similarity: " + sim + ")\n" +
                           "Task: " + r.task_description + "\n";
        if (!r.final_answer.empty()) head += "Answer: " + r.final_answer + "\n";
        head += "Code:\n```python\n";
        const std::string tail = "\n```\n";
        if (out.size() + head.size() + tail.size() >= budget) break;
        std::size_t room = budget - out.size() - head.size() - tail.size();
        std::string code = r.final_code;
        if (code.size() > room) {
            if (room < marker.size()) break;
            code = code.substr(0, room - marker.size()) + std::string(marker);
        }
        out += head + code + tail;
    }
    return out;
}

}  // namespace taskweave

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace taskweave {

enum class ErrorCode {
    MalformedPlan,
    DanglingDependency,
    CyclicPlan,
    IllegalTransition,
    UnknownTask,
    PlanGenerationFailed,
    MergeProducedCycle,
    SpawnFailed,
    HandshakeTimeout,
    Timeout,
    WorkerCrashed,
    TransportError,
    RateLimited,
    CassetteExhausted,
    MissingBinding,
    LibraryMissing,
    EvolutionRejected,
    NoTrials,
    PreconditionViolation,
    StorageFailure,
    NoScoredSteps,
    DomainError,
    IoError,
    ReplanBudgetExhausted,
    RunNotHeld,
    UnknownRun,
    BindFailure,
    ConfigError,
};

constexpr std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
    case ErrorCode::MalformedPlan: return "MalformedPlan";
    case ErrorCode::DanglingDependency: return "DanglingDependency";
    case ErrorCode::CyclicPlan: return "CyclicPlan";
    case ErrorCode::IllegalTransition: return "IllegalTransition";
    case ErrorCode::UnknownTask: return "UnknownTask";
    case ErrorCode::PlanGenerationFailed: return "PlanGenerationFailed";
    case ErrorCode::MergeProducedCycle: return "MergeProducedCycle";
    case ErrorCode::SpawnFailed: return "SpawnFailed";
    case ErrorCode::HandshakeTimeout: return "HandshakeTimeout";
    case ErrorCode::Timeout: return "Timeout";
    case ErrorCode::WorkerCrashed: return "WorkerCrashed";
    case ErrorCode::TransportError: return "TransportError";
    case ErrorCode::RateLimited: return "RateLimited";
    case ErrorCode::CassetteExhausted: return "CassetteExhausted";
    case ErrorCode::MissingBinding: return "MissingBinding";
    case ErrorCode::LibraryMissing: return "LibraryMissing";
    case ErrorCode::EvolutionRejected: return "EvolutionRejected";
    case ErrorCode::NoTrials: return "NoTrials";
    case ErrorCode::PreconditionViolation: return "PreconditionViolation";
    case ErrorCode::StorageFailure: return "StorageFailure";
    case ErrorCode::NoScoredSteps: return "NoScoredSteps";
    case ErrorCode::DomainError: return "DomainError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ReplanBudgetExhausted: return "ReplanBudgetExhausted";
    case ErrorCode::RunNotHeld: return "RunNotHeld";
    case ErrorCode::UnknownRun: return "UnknownRun";
    case ErrorCode::BindFailure: return "BindFailure";
    case ErrorCode::ConfigError: return "ConfigError";
    }
    return "Unknown";
}

/// Every failure surfaced by the engine carries one of the codes above so
/// callers (and the HTTP layer) can branch on it without string matching.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace taskweave

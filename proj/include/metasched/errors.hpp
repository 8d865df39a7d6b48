#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace metasched {

// Every failure the library can raise, as a stable machine-readable code.
// Wire replies and CLI output use the snake_case name from code_name().
enum class Err {
  ArithmeticOverflow,
  InsufficientResources,
  IllegalTransition,
  AlreadyRegistered,
  UnknownAgent,
  OfferNotFound,
  OfferExpired,
  OverSubscription,
  JobNotQueued,
  JobNotRunning,
  RequestMismatch,
  PoolExhausted,
  DuplicateInternalEndpoint,
  MappingNotFound,
  ChannelDown,
  UnknownTenant,
  UnknownCluster,
  ClockWentBackwards,
  NeverFits,
  RequestUnsatisfiable,
  UnknownJob,
  NotCancellable,
  ConfigInvalid,
  TraceMalformed,
  OversizeLine,
  MalformedJson,
  UnknownType,
  BindFailed,
  LogCorrupt,
  SnapshotCorrupt,
  InvalidArgument,
};

inline std::string_view code_name(Err e) {
  switch (e) {
    case Err::ArithmeticOverflow: return "arithmetic_overflow";
    case Err::InsufficientResources: return "insufficient_resources";
    case Err::IllegalTransition: return "illegal_transition";
    case Err::AlreadyRegistered: return "already_registered";
    case Err::UnknownAgent: return "unknown_agent";
    case Err::OfferNotFound: return "offer_not_found";
    case Err::OfferExpired: return "offer_expired";
    case Err::OverSubscription: return "over_subscription";
    case Err::JobNotQueued: return "job_not_queued";
    case Err::JobNotRunning: return "job_not_running";
    case Err::RequestMismatch: return "request_mismatch";
    case Err::PoolExhausted: return "pool_exhausted";
    case Err::DuplicateInternalEndpoint: return "duplicate_internal_endpoint";
    case Err::MappingNotFound: return "mapping_not_found";
    case Err::ChannelDown: return "channel_down";
    case Err::UnknownTenant: return "unknown_tenant";
    case Err::UnknownCluster: return "unknown_cluster";
    case Err::ClockWentBackwards: return "clock_went_backwards";
    case Err::NeverFits: return "never_fits";
    case Err::RequestUnsatisfiable: return "request_unsatisfiable";
    case Err::UnknownJob: return "unknown_job";
    case Err::NotCancellable: return "not_cancellable";
    case Err::ConfigInvalid: return "config_invalid";
    case Err::TraceMalformed: return "trace_malformed";
    case Err::OversizeLine: return "oversize_line";
    case Err::MalformedJson: return "bad_request";
    case Err::UnknownType: return "unknown_type";
    case Err::BindFailed: return "bind_failed";
    case Err::LogCorrupt: return "log_corrupt";
    case Err::SnapshotCorrupt: return "snapshot_corrupt";
    case Err::InvalidArgument: return "invalid_argument";
  }
  return "unknown_error";
}

class Error : public std::runtime_error {
 public:
  Error(Err code, const std::string& what)
      : std::runtime_error(std::string(code_name(code)) + ": " + what), code_(code) {}

  Err code() const { return code_; }
  std::string code_string() const { return std::string(code_name(code_)); }

 private:
  Err code_;
};

[[noreturn]] inline void fail(Err code, const std::string& what) { throw Error(code, what); }

}  // namespace metasched

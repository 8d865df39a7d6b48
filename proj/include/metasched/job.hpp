#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>

#include <json.hpp>

#include "metasched/errors.hpp"
#include "metasched/resources.hpp"

namespace metasched {

struct JobSpec {
  std::string tenant_id;
  std::string command;  // opaque; never executed, only scheduled
  ResourceVector request;
  std::int64_t est_duration_s = 0;  // user-supplied runtime estimate
  std::optional<std::string> cluster_affinity;

  void validate() const {
    if (tenant_id.empty()) fail(Err::InvalidArgument, "job spec needs a tenant_id");
    if (!request.any_positive()) {
      fail(Err::InvalidArgument, "job request must have a positive component");
    }
    if (est_duration_s < 1) fail(Err::InvalidArgument, "est_duration_s must be >= 1");
  }
};

inline void to_json(nlohmann::json& j, const JobSpec& s) {
  j = nlohmann::json{{"tenant_id", s.tenant_id},
                     {"command", s.command},
                     {"request", s.request},
                     {"est_duration_s", s.est_duration_s}};
  if (s.cluster_affinity) j["cluster_affinity"] = *s.cluster_affinity;
}

inline void from_json(const nlohmann::json& j, JobSpec& s) {
  s.tenant_id = j.at("tenant_id").get<std::string>();
  s.command = j.value("command", std::string{});
  s.request = j.at("request").get<ResourceVector>();
  s.est_duration_s = j.at("est_duration_s").get<std::int64_t>();
  if (j.contains("cluster_affinity") && !j.at("cluster_affinity").is_null()) {
    s.cluster_affinity = j.at("cluster_affinity").get<std::string>();
  } else {
    s.cluster_affinity.reset();
  }
}

enum class JobState { SUBMITTED, QUEUED, LAUNCHED, RUNNING, FINISHED, FAILED, LOST, CANCELLED };

enum class JobEvent { queued, launched, running, finished, failed, lost, cancelled, requeued };

inline std::string_view to_string(JobState s) {
  switch (s) {
    case JobState::SUBMITTED: return "SUBMITTED";
    case JobState::QUEUED: return "QUEUED";
    case JobState::LAUNCHED: return "LAUNCHED";
    case JobState::RUNNING: return "RUNNING";
    case JobState::FINISHED: return "FINISHED";
    case JobState::FAILED: return "FAILED";
    case JobState::LOST: return "LOST";
    case JobState::CANCELLED: return "CANCELLED";
  }
  return "?";
}

inline std::string_view to_string(JobEvent e) {
  switch (e) {
    case JobEvent::queued: return "queued";
    case JobEvent::launched: return "launched";
    case JobEvent::running: return "running";
    case JobEvent::finished: return "finished";
    case JobEvent::failed: return "failed";
    case JobEvent::lost: return "lost";
    case JobEvent::cancelled: return "cancelled";
    case JobEvent::requeued: return "requeued";
  }
  return "?";
}

inline JobState job_state_from_string(const std::string& s) {
  for (JobState st : {JobState::SUBMITTED, JobState::QUEUED, JobState::LAUNCHED, JobState::RUNNING,
                      JobState::FINISHED, JobState::FAILED, JobState::LOST, JobState::CANCELLED}) {
    if (to_string(st) == s) return st;
  }
  fail(Err::InvalidArgument, "unknown job state: " + s);
}

inline bool is_terminal(JobState s) {
  return s == JobState::FINISHED || s == JobState::FAILED || s == JobState::CANCELLED;
}

struct JobRecord {
  std::string job_id;
  JobSpec spec;
  JobState state = JobState::SUBMITTED;
  std::optional<std::string> cluster_id;
  std::optional<std::string> agent_id;
  std::optional<double> t_submit;
  std::optional<double> t_start;
  std::optional<double> t_finish;
};

inline void to_json(nlohmann::json& j, const JobRecord& r) {
  j = nlohmann::json{{"job_id", r.job_id}, {"spec", r.spec}, {"state", std::string(to_string(r.state))}};
  if (r.cluster_id) j["cluster_id"] = *r.cluster_id;
  if (r.agent_id) j["agent_id"] = *r.agent_id;
  if (r.t_submit) j["t_submit"] = *r.t_submit;
  if (r.t_start) j["t_start"] = *r.t_start;
  if (r.t_finish) j["t_finish"] = *r.t_finish;
}

inline void from_json(const nlohmann::json& j, JobRecord& r) {
  r.job_id = j.at("job_id").get<std::string>();
  r.spec = j.at("spec").get<JobSpec>();
  r.state = job_state_from_string(j.at("state").get<std::string>());
  r.cluster_id =
      j.contains("cluster_id") ? std::optional(j.at("cluster_id").get<std::string>()) : std::nullopt;
  r.agent_id = j.contains("agent_id") ? std::optional(j.at("agent_id").get<std::string>()) : std::nullopt;
  r.t_submit = j.contains("t_submit") ? std::optional(j.at("t_submit").get<double>()) : std::nullopt;
  r.t_start = j.contains("t_start") ? std::optional(j.at("t_start").get<double>()) : std::nullopt;
  r.t_finish = j.contains("t_finish") ? std::optional(j.at("t_finish").get<double>()) : std::nullopt;
}

namespace detail {
inline bool edge_allowed(JobState from, JobEvent ev, JobState& to) {
  switch (from) {
    case JobState::SUBMITTED:
      if (ev == JobEvent::queued) return to = JobState::QUEUED, true;
      if (ev == JobEvent::cancelled) return to = JobState::CANCELLED, true;
      return false;
    case JobState::QUEUED:
      if (ev == JobEvent::launched) return to = JobState::LAUNCHED, true;
      if (ev == JobEvent::cancelled) return to = JobState::CANCELLED, true;
      return false;
    case JobState::LAUNCHED:
      if (ev == JobEvent::running) return to = JobState::RUNNING, true;
      if (ev == JobEvent::lost) return to = JobState::LOST, true;
      return false;
    case JobState::RUNNING:
      if (ev == JobEvent::finished) return to = JobState::FINISHED, true;
      if (ev == JobEvent::failed) return to = JobState::FAILED, true;
      if (ev == JobEvent::lost) return to = JobState::LOST, true;
      return false;
    case JobState::LOST:
      if (ev == JobEvent::requeued) return to = JobState::QUEUED, true;
      return false;
    default:
      return false;
  }
}
}  // namespace detail

// Applies one lifecycle event, updating state and timestamps. Only the edges
// of the transition table are accepted; anything else raises IllegalTransition.
// Timestamp bookkeeping per edge:
//   queued      -> (no timestamp; t_submit is set at record creation)
//   launched    -> records agent/cluster via the launched-edge caller
//   running     -> t_start = now
//   finished / failed -> t_finish = now
//   lost        -> agent_id cleared
//   requeued    -> back to QUEUED, agent stays cleared
inline JobRecord advance_job_state(JobRecord job, JobEvent ev, double now,
                                   const std::optional<std::string>& agent_id = std::nullopt,
                                   const std::optional<std::string>& cluster_id = std::nullopt) {
  JobState to;
  if (!detail::edge_allowed(job.state, ev, to)) {
    fail(Err::IllegalTransition,
         std::string(to_string(job.state)) + " + " + std::string(to_string(ev)));
  }
  if (job.t_submit && now < *job.t_submit) {
    fail(Err::ClockWentBackwards, "event before t_submit");
  }
  switch (ev) {
    case JobEvent::launched:
      job.agent_id = agent_id;
      if (cluster_id) job.cluster_id = cluster_id;
      if (!job.agent_id) fail(Err::InvalidArgument, "launched edge needs an agent_id");
      break;
    case JobEvent::running:
      if (job.t_start && now < *job.t_start) fail(Err::ClockWentBackwards, "t_start regressed");
      job.t_start = now;
      break;
    case JobEvent::finished:
    case JobEvent::failed:
      if (job.t_start && now < *job.t_start) fail(Err::ClockWentBackwards, "t_finish < t_start");
      job.t_finish = now;
      break;
    case JobEvent::lost:
      job.agent_id.reset();
      break;
    case JobEvent::queued:
    case JobEvent::requeued:
    case JobEvent::cancelled:
      break;
  }
  job.state = to;
  return job;
}

struct TenantAccount {
  std::string tenant_id;
  double weight = 1.0;  // fair-share weight, > 0
};

inline void to_json(nlohmann::json& j, const TenantAccount& t) {
  j = nlohmann::json{{"tenant_id", t.tenant_id}, {"weight", t.weight}};
}

inline void from_json(const nlohmann::json& j, TenantAccount& t) {
  t.tenant_id = j.at("tenant_id").get<std::string>();
  t.weight = j.value("weight", 1.0);
  if (!(t.weight > 0)) fail(Err::InvalidArgument, "tenant weight must be > 0");
}

// All job records, keyed by job id. Owned by the scheduler loop.
class JobTable {
 public:
  JobRecord& get(const std::string& job_id) {
    auto it = jobs_.find(job_id);
    if (it == jobs_.end()) fail(Err::UnknownJob, job_id);
    return it->second;
  }

  const JobRecord& get(const std::string& job_id) const {
    auto it = jobs_.find(job_id);
    if (it == jobs_.end()) fail(Err::UnknownJob, job_id);
    return it->second;
  }

  bool contains(const std::string& job_id) const { return jobs_.count(job_id) != 0; }

  void put(JobRecord rec) { jobs_[rec.job_id] = std::move(rec); }

  const std::map<std::string, JobRecord>& all() const { return jobs_; }
  std::map<std::string, JobRecord>& all() { return jobs_; }

 private:
  std::map<std::string, JobRecord> jobs_;  // ordered for deterministic iteration
};

}  // namespace metasched

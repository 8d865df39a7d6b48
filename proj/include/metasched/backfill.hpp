#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "metasched/errors.hpp"
#include "metasched/resources.hpp"

namespace metasched {

// One running job as the backfill planner sees it: what it holds and when it
// is estimated to give it back. Callers fold overruns in beforehand
// (est_finish_at = max(now, t_start + est)).
struct RunningSlice {
  ResourceVector request;
  double est_finish_at = 0;
};

// Earliest-feasible slot for the head-of-queue job, computed from running
// jobs' estimated completions.
struct Reservation {
  std::string cluster_id;
  std::string job_id;
  double start_at = 0;
  ResourceVector resources;
};

// A queued job as backfill sees it.
struct QueuedJob {
  std::string job_id;
  ResourceVector request;
  std::int64_t est_duration_s = 0;
};

// Sweeps the release times of `running` and returns the first instant >= now
// at which the head request fits, assuming each running job frees its request
// exactly at its est_finish_at. Precondition: the head does not fit the
// current free vector (callers launch directly when it does).
inline Reservation compute_reservation(const std::string& cluster_id, const std::string& job_id,
                                       const ResourceVector& head_request,
                                       const std::vector<RunningSlice>& running,
                                       const ResourceVector& cluster_total, double now) {
  if (!rv_fits(head_request, cluster_total)) {
    fail(Err::NeverFits, "head request exceeds cluster capacity");
  }
  ResourceVector in_use;
  for (const auto& r : running) in_use = rv_add(in_use, r.request);
  ResourceVector free = rv_saturating_sub(cluster_total, in_use);

  if (rv_fits(head_request, free)) {
    return Reservation{cluster_id, job_id, now, head_request};
  }

  std::vector<RunningSlice> by_release = running;
  std::sort(by_release.begin(), by_release.end(), [](const RunningSlice& a, const RunningSlice& b) {
    return a.est_finish_at < b.est_finish_at;
  });
  for (const auto& r : by_release) {
    free = rv_add(free, r.request);
    if (rv_fits(head_request, free)) {
      return Reservation{cluster_id, job_id, std::max(now, r.est_finish_at), head_request};
    }
  }
  // All releases applied means free == total, and the fit was checked upfront.
  fail(Err::NeverFits, "unreachable: head fits total but no release point found");
}

// EASY backfill selection. Scans queue[1..] in order and greedily picks jobs
// that fit the remaining free vector and cannot delay the reserved head:
// either they finish before the reservation starts, or they fit the shadow
// capacity the head leaves untouched. The shadow is the conservative
// max(0, free - reservation.resources): capacity that is already free now and
// that the head cannot need at start_at.
inline std::vector<std::string> backfill_select_with_shadow(
    const std::vector<QueuedJob>& cluster_queue, ResourceVector free,
    const Reservation& reservation, ResourceVector shadow, double now) {
  std::vector<std::string> selected;
  if (cluster_queue.empty()) return selected;
  for (std::size_t i = 1; i < cluster_queue.size(); ++i) {
    const QueuedJob& job = cluster_queue[i];
    if (!rv_fits(job.request, free)) continue;
    bool ends_before_head = now + static_cast<double>(job.est_duration_s) <= reservation.start_at;
    bool fits_shadow = rv_fits(job.request, shadow);
    if (!ends_before_head && !fits_shadow) continue;
    selected.push_back(job.job_id);
    free = rv_checked_sub(free, job.request);
    // Jobs that end before the head starts only borrow capacity the head
    // gets back in time; they leave the shadow alone.
    if (!ends_before_head) shadow = rv_checked_sub(shadow, job.request);
  }
  return selected;
}

// Per-agent capacity timeline used by the scheduler: earliest instant at
// which `request` fits on this agent, given its current free vector and the
// estimated completions of the jobs it is running.
inline std::optional<double> earliest_fit_on_agent(const ResourceVector& request,
                                                   const ResourceVector& agent_total,
                                                   ResourceVector agent_free,
                                                   std::vector<RunningSlice> running, double now) {
  if (!rv_fits(request, agent_total)) return std::nullopt;
  if (rv_fits(request, agent_free)) return now;
  std::sort(running.begin(), running.end(), [](const RunningSlice& a, const RunningSlice& b) {
    return a.est_finish_at < b.est_finish_at;
  });
  for (const auto& r : running) {
    agent_free = rv_add(agent_free, r.request);
    if (rv_fits(request, agent_free)) return std::max(now, r.est_finish_at);
  }
  return std::nullopt;  // running set inconsistent with free; caller treats as no fit
}

// Projected free vector on one agent at time `t`, counting releases with
// est_finish_at <= t.
inline ResourceVector projected_free_at(const ResourceVector& agent_free,
                                        const std::vector<RunningSlice>& running, double t) {
  ResourceVector free = agent_free;
  for (const auto& r : running) {
    if (r.est_finish_at <= t) free = rv_add(free, r.request);
  }
  return free;
}

}  // namespace metasched

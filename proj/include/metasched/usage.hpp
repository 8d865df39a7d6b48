#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "metasched/errors.hpp"
#include "metasched/job.hpp"
#include "metasched/resources.hpp"

namespace metasched {

// Decayed consumption of one tenant. core_seconds and mem_mb_seconds decay;
// the live counts do not.
struct UsageVector {
  double core_seconds = 0.0;
  double mem_mb_seconds = 0.0;
  std::int64_t running_jobs = 0;
  std::map<std::string, std::int64_t> queued_by_cluster;
};

inline void to_json(nlohmann::json& j, const UsageVector& u) {
  j = nlohmann::json{{"core_seconds", u.core_seconds},
                     {"mem_mb_seconds", u.mem_mb_seconds},
                     {"running_jobs", u.running_jobs},
                     {"queued_by_cluster", u.queued_by_cluster}};
}

inline void from_json(const nlohmann::json& j, UsageVector& u) {
  u.core_seconds = j.value("core_seconds", 0.0);
  u.mem_mb_seconds = j.value("mem_mb_seconds", 0.0);
  u.running_jobs = j.value("running_jobs", std::int64_t{0});
  u.queued_by_cluster = j.value("queued_by_cluster", std::map<std::string, std::int64_t>{});
}

// Per-tenant accumulated usage with exponential half-life decay, applied
// lazily: accumulated dimensions are multiplied by 2^(-(now - last)/half_life)
// whenever the ledger is brought forward. A value recorded at t_i therefore
// contributes v_i * 2^(-(now - t_i)/half_life) at any later read, regardless of
// how many decay steps happened in between.
class UsageLedger {
 public:
  explicit UsageLedger(double decay_half_life_s = 86400.0) : half_life_s_(decay_half_life_s) {
    if (!(half_life_s_ > 0)) fail(Err::InvalidArgument, "half life must be positive");
  }

  void ensure_tenant(const std::string& tenant_id) { usage_[tenant_id]; }

  bool has_tenant(const std::string& tenant_id) const { return usage_.count(tenant_id) != 0; }

  // Brings every decayed dimension forward to `now`. Counts are untouched.
  void decay_to(double now) {
    if (now < last_decay_at_) fail(Err::ClockWentBackwards, "decay time regressed");
    double factor = std::exp2(-(now - last_decay_at_) / half_life_s_);
    for (auto& [tenant, u] : usage_) {
      u.core_seconds *= factor;
      u.mem_mb_seconds *= factor;
    }
    last_decay_at_ = now;
  }

  // Records actual consumption on job completion. Decays lazily first so the
  // new contribution enters undecayed at `now`.
  const UsageVector& record_usage(const std::string& tenant_id, const ResourceVector& request,
                                  double duration_s, double now) {
    auto it = usage_.find(tenant_id);
    if (it == usage_.end()) fail(Err::UnknownTenant, tenant_id);
    decay_to(now);
    it->second.core_seconds += request.cpus() * duration_s;
    it->second.mem_mb_seconds += static_cast<double>(request.mem_mb) * duration_s;
    return it->second;
  }

  // Usage decayed to `now` without mutating the ledger. Ranking reads pass
  // through here so replaying a log reproduces ledger state exactly.
  UsageVector decayed_view(const std::string& tenant_id, double now) const {
    auto it = usage_.find(tenant_id);
    if (it == usage_.end()) fail(Err::UnknownTenant, tenant_id);
    if (now < last_decay_at_) fail(Err::ClockWentBackwards, "view time regressed");
    double factor = std::exp2(-(now - last_decay_at_) / half_life_s_);
    UsageVector u = it->second;
    u.core_seconds *= factor;
    u.mem_mb_seconds *= factor;
    return u;
  }

  UsageVector& mutable_usage(const std::string& tenant_id) { return usage_[tenant_id]; }

  const std::map<std::string, UsageVector>& all() const { return usage_; }
  double half_life_s() const { return half_life_s_; }
  double last_decay_at() const { return last_decay_at_; }

  void restore(std::map<std::string, UsageVector> usage, double last_decay_at) {
    usage_ = std::move(usage);
    last_decay_at_ = last_decay_at;
  }

 private:
  double half_life_s_;
  double last_decay_at_ = 0.0;
  std::map<std::string, UsageVector> usage_;
};

// Weighted dominant usage: the larger of the capacity-normalized core-second
// and memory-second shares, divided by the tenant's weight. H (the half-life)
// normalizes the x-seconds dimensions to the same scale as capacity.
inline double weighted_dominant_usage(const UsageVector& u, double weight,
                                      const ResourceVector& capacity_total, double half_life_s) {
  double cpu_share = capacity_total.cpu_centi > 0
                         ? u.core_seconds / (capacity_total.cpus() * half_life_s)
                         : 0.0;
  double mem_share = capacity_total.mem_mb > 0
                         ? u.mem_mb_seconds / (static_cast<double>(capacity_total.mem_mb) * half_life_s)
                         : 0.0;
  return std::max(cpu_share, mem_share) / weight;
}

// Tenants ordered ascending by weighted dominant usage at `now`; lower usage
// is offered resources first. Ties break on tenant_id so runs are reproducible.
inline std::vector<std::string> fair_share_rank(const UsageLedger& ledger,
                                                const std::vector<TenantAccount>& tenants,
                                                const ResourceVector& cluster_totals, double now) {
  std::vector<std::pair<double, std::string>> keyed;
  keyed.reserve(tenants.size());
  for (const auto& t : tenants) {
    UsageVector u = ledger.has_tenant(t.tenant_id) ? ledger.decayed_view(t.tenant_id, now)
                                                   : UsageVector{};
    keyed.emplace_back(weighted_dominant_usage(u, t.weight, cluster_totals, ledger.half_life_s()),
                       t.tenant_id);
  }
  std::sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return a.second < b.second;
  });
  std::vector<std::string> out;
  out.reserve(keyed.size());
  for (auto& [k, id] : keyed) out.push_back(std::move(id));
  return out;
}

// Per-cluster cap on one tenant's simultaneously active jobs
// (QUEUED + LAUNCHED + RUNNING).
struct SubmissionLimit {
  std::string cluster_id;
  std::int64_t max_active_per_tenant = 1;
};

struct AdmitVerdict {
  bool admitted = false;
  std::int64_t active_count = 0;
  std::int64_t limit = 0;
};

inline AdmitVerdict check_submission(std::int64_t active_count, const SubmissionLimit& limit) {
  return AdmitVerdict{active_count < limit.max_active_per_tenant, active_count,
                      limit.max_active_per_tenant};
}

}  // namespace metasched

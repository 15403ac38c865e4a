#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace advrank {

enum class AttackKind {
  ca_plus,
  ca_minus,
  qa_plus,
  qa_minus,
  ica_plus,
  ica_minus,
  iqa_plus,
  iqa_minus,
  max_shift,
  dist_ca_plus,
  dist_qa_minus,
};

/// Canonical names: "CA+", "CA-", "QA+", "QA-", "I-CA+", ..., "MaxShift",
/// "DistAlt-CA+", "DistAlt-QA-".
std::string_view to_string(AttackKind kind);
AttackKind parse_attack_kind(std::string_view name);
std::vector<AttackKind> parse_attack_kinds(std::string_view comma_separated);

/// The perturbed item is a candidate (CA family, incl. universal and DistAlt-CA+).
bool perturbs_candidate(AttackKind kind);
/// The perturbed item is a query (QA family, incl. universal and DistAlt-QA-).
bool perturbs_query(AttackKind kind);
/// "+" attacks raise the rank (push toward 0).
bool raises_rank(AttackKind kind);
bool is_universal(AttackKind kind);
/// Universal kinds map onto their per-image objective.
AttackKind per_image_kind(AttackKind kind);

}  // namespace advrank

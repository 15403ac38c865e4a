#include "advrank/attack_kind.hpp"

#include <array>
#include <stdexcept>
#include <utility>

namespace advrank {

namespace {

constexpr std::array<std::pair<AttackKind, std::string_view>, 11> kNames{{
    {AttackKind::ca_plus, "CA+"},
    {AttackKind::ca_minus, "CA-"},
    {AttackKind::qa_plus, "QA+"},
    {AttackKind::qa_minus, "QA-"},
    {AttackKind::ica_plus, "I-CA+"},
    {AttackKind::ica_minus, "I-CA-"},
    {AttackKind::iqa_plus, "I-QA+"},
    {AttackKind::iqa_minus, "I-QA-"},
    {AttackKind::max_shift, "MaxShift"},
    {AttackKind::dist_ca_plus, "DistAlt-CA+"},
    {AttackKind::dist_qa_minus, "DistAlt-QA-"},
}};

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

}  // namespace

std::string_view to_string(AttackKind kind) {
  for (const auto& [k, name] : kNames) {
    if (k == kind) return name;
  }
  return "?";
}

AttackKind parse_attack_kind(std::string_view name) {
  name = trim(name);
  for (const auto& [k, n] : kNames) {
    if (n == name) return k;
  }
  throw std::invalid_argument("unknown attack kind '" + std::string(name) + "'");
}

std::vector<AttackKind> parse_attack_kinds(std::string_view list) {
  std::vector<AttackKind> out;
  while (!list.empty()) {
    const auto comma = list.find(',');
    const auto item = trim(list.substr(0, comma));
    if (!item.empty()) out.push_back(parse_attack_kind(item));
    if (comma == std::string_view::npos) break;
    list.remove_prefix(comma + 1);
  }
  return out;
}

bool perturbs_candidate(AttackKind kind) {
  switch (kind) {
    case AttackKind::ca_plus:
    case AttackKind::ca_minus:
    case AttackKind::ica_plus:
    case AttackKind::ica_minus:
    case AttackKind::dist_ca_plus:
      return true;
    default:
      return false;
  }
}

bool perturbs_query(AttackKind kind) {
  switch (kind) {
    case AttackKind::qa_plus:
    case AttackKind::qa_minus:
    case AttackKind::iqa_plus:
    case AttackKind::iqa_minus:
    case AttackKind::dist_qa_minus:
      return true;
    default:
      return false;
  }
}

bool raises_rank(AttackKind kind) {
  switch (kind) {
    case AttackKind::ca_plus:
    case AttackKind::qa_plus:
    case AttackKind::ica_plus:
    case AttackKind::iqa_plus:
    case AttackKind::dist_ca_plus:
      return true;
    default:
      return false;
  }
}

bool is_universal(AttackKind kind) {
  switch (kind) {
    case AttackKind::ica_plus:
    case AttackKind::ica_minus:
    case AttackKind::iqa_plus:
    case AttackKind::iqa_minus:
      return true;
    default:
      return false;
  }
}

AttackKind per_image_kind(AttackKind kind) {
  switch (kind) {
    case AttackKind::ica_plus:
      return AttackKind::ca_plus;
    case AttackKind::ica_minus:
      return AttackKind::ca_minus;
    case AttackKind::iqa_plus:
      return AttackKind::qa_plus;
    case AttackKind::iqa_minus:
      return AttackKind::qa_minus;
    default:
      return kind;
  }
}

}  // namespace advrank

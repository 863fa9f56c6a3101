#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cbp/tokenizer.hpp"

namespace cbp::data {

// Synthetic instruction-task families. The first four are reserved for the
// server-side domain corpus, the last four for user customization tasks; the
// two pools never overlap.
// Each customization family is a reworded (format-shifted) relative of one
// domain skill, so a domain-trained prompt generator has something real to
// transfer while the shifted surface still throws off the bare model.
enum class Family {
  // domain
  MinDigit,
  CountMod,
  Vowels,
  SumDigit,
  // customization
  Parity,    // presence count mod 2, surface shifted from CountMod
  Smallest,  // reworded MinDigit
  Mostly,    // yes/no majority question, reworded Vowels
  Tally,     // reordered CountMod wording
};

bool is_domain_family(Family f);
const char* family_name(Family f);
Family family_from_name(const std::string& name);

struct TaskSpec {
  std::string task_id;
  Family family;
  std::uint64_t seed{0};
};

struct Instance {
  std::string task_id;
  std::string instruction;
  std::string answer;  // gold, always one of candidates
  std::vector<std::string> candidates;
};

// Fixed candidate set of a family (answers carry a leading space).
std::vector<std::string> candidates_for(Family f);

// Rule-based solver; answers every instruction of the family exactly.
std::string solve(Family f, const std::string& instruction);

std::vector<Instance> make_domain_dataset(const std::vector<TaskSpec>& families,
                                          int n_per_family, std::uint64_t seed);

struct CustomizationSplit {
  std::vector<Instance> shots;
  std::vector<Instance> eval;
};

CustomizationSplit make_customization_task(const TaskSpec& spec, int shots,
                                           int eval_n, std::uint64_t seed);

lm::Example to_example(const Instance& inst);
lm::Example to_example(const Instance& inst, const std::string& candidate);

void write_jsonl(const std::string& path, const std::vector<Instance>& set);
std::vector<Instance> read_jsonl(const std::string& path);

}  // namespace cbp::data

#include "cbp/datagen.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "cbp/rng.hpp"

namespace cbp::data {

namespace {

const char kVowels[] = "aeiou";
const char kConsonants[] = "bcdfghjklmnpqrstvwyz";  // 'x' reserved for counting
// filler letters for the counting families; excludes the counted char 'x'
const char kFiller[] = "abcdefghijklmnopqrstuvwyz";

char rand_letter(GaussianRng& rng) { return kFiller[rng.below(25)]; }

std::string rand_letters(GaussianRng& rng, int len) {
  std::string s(len, 'a');
  for (auto& c : s) c = rand_letter(rng);
  return s;
}

std::string wrap(const std::string& body) { return "q: " + body + " a:"; }

// body of "q: <body> a:"
std::string unwrap(const std::string& instruction) {
  if (instruction.size() < 6 || instruction.substr(0, 3) != "q: " ||
      instruction.substr(instruction.size() - 3) != " a:") {
    throw std::invalid_argument("malformed instruction: " + instruction);
  }
  return instruction.substr(3, instruction.size() - 6);
}

std::string between(const std::string& s, const std::string& pre,
                    const std::string& post) {
  auto a = s.find(pre);
  auto b = s.rfind(post);
  if (a == std::string::npos || b == std::string::npos || b < a + pre.size()) {
    throw std::invalid_argument("cannot parse: " + s);
  }
  return s.substr(a + pre.size(), b - a - pre.size());
}

// payload of a "<wording> <payload>?" body, whatever the wording
std::string last_token(const std::string& body) {
  if (body.empty() || body.back() != '?') {
    throw std::invalid_argument("cannot parse: " + body);
  }
  const auto sp = body.find_last_of(' ');
  if (sp == std::string::npos || sp + 2 >= body.size()) {
    throw std::invalid_argument("cannot parse: " + body);
  }
  return body.substr(sp + 1, body.size() - sp - 2);
}

struct Made {
  std::string body;
  int cls;
};

int n_classes(Family f) { return static_cast<int>(candidates_for(f).size()); }

Made make_body(Family f, int cls, GaussianRng& rng) {
  switch (f) {
    case Family::Parity: {
      // CountMod surface with the modulus shifted; counts restricted to
      // {0, 1} so the two labelings agree on the support
      std::string s = rand_letters(rng, 9 + int(rng.below(3)));
      if (cls == 1) s[rng.below(s.size())] = 'x';
      return {"count of x in " + s + " mod 2?", cls};
    }
    case Family::Smallest: {
      const int gold = cls;  // 0..3, as in MinDigit
      std::string d(6, '0');
      for (auto& ch : d) ch = char('0' + gold + rng.below(10 - gold));
      d[rng.below(d.size())] = char('0' + gold);
      return {"smallest digit of " + d + "?", cls};
    }
    case Family::Mostly: {
      const int len = 9;
      const int nv = (cls == 0) ? 5 + int(rng.below(3)) : int(rng.below(5));
      std::string s;
      for (int i = 0; i < nv; ++i) s.push_back(kVowels[rng.below(5)]);
      for (int i = nv; i < len; ++i) s.push_back(kConsonants[rng.below(20)]);
      for (size_t i = s.size() - 1; i > 0; --i) {
        std::swap(s[i], s[rng.below(i + 1)]);
      }
      return {"mostly vowels in " + s + "?", cls};
    }
    case Family::Tally: {
      std::string s = rand_letters(rng, 9 + int(rng.below(3)));
      const int k = cls + 3 * int(rng.below(2));
      std::vector<int> idx(s.size());
      for (size_t i = 0; i < idx.size(); ++i) idx[i] = int(i);
      for (size_t i = idx.size() - 1; i > 0; --i) {
        std::swap(idx[i], idx[rng.below(i + 1)]);
      }
      for (int i = 0; i < k && i < int(s.size()); ++i) s[idx[i]] = 'x';
      return {"the x tally in " + s + " mod 3?", cls};
    }
    case Family::MinDigit: {
      // domain families rotate through several wordings so the generator
      // keys on the content characters rather than one fixed pattern
      static const char* kW[] = {"min digit of ", "least digit of ",
                                 "low digit of "};
      const int gold = cls;  // 0..3
      std::string d(6, '0');
      for (auto& ch : d) ch = char('0' + gold + rng.below(10 - gold));
      d[rng.below(d.size())] = char('0' + gold);
      return {kW[rng.below(3)] + d + "?", cls};
    }
    case Family::CountMod: {
      static const char* kW[] = {"count of x in ", "number of x in ",
                                 "total x in "};
      std::string s = rand_letters(rng, 9 + int(rng.below(3)));
      const int k = cls + 3 * int(rng.below(2));
      std::vector<int> idx(s.size());
      for (size_t i = 0; i < idx.size(); ++i) idx[i] = int(i);
      for (size_t i = idx.size() - 1; i > 0; --i) {
        std::swap(idx[i], idx[rng.below(i + 1)]);
      }
      for (int i = 0; i < k && i < int(s.size()); ++i) s[idx[i]] = 'x';
      return {kW[rng.below(3)] + s + " mod 3?", cls};
    }
    case Family::Vowels: {
      static const char* kW[] = {"more vowels than others in ",
                                 "vowels outnumber others in ",
                                 "vowels win in "};
      const int len = 9;
      const int nv = (cls == 0) ? 5 + int(rng.below(3)) : int(rng.below(5));
      std::string s;
      for (int i = 0; i < nv; ++i) s.push_back(kVowels[rng.below(5)]);
      for (int i = nv; i < len; ++i) s.push_back(kConsonants[rng.below(20)]);
      for (size_t i = s.size() - 1; i > 0; --i) {
        std::swap(s[i], s[rng.below(i + 1)]);
      }
      return {kW[rng.below(3)] + s + "?", cls};
    }
    case Family::SumDigit: {
      static const char* kW[] = {"sum of ", "total of ", "adding "};
      // digits distribute a total of cls, so the answer is the plain sum
      std::string d(4, '0');
      for (int u = 0; u < cls; ++u) ++d[rng.below(d.size())];
      return {kW[rng.below(3)] + d + "?", cls};
    }
  }
  throw std::logic_error("unknown family");
}

}  // namespace

bool is_domain_family(Family f) {
  switch (f) {
    case Family::MinDigit:
    case Family::CountMod:
    case Family::Vowels:
    case Family::SumDigit:
      return true;
    default:
      return false;
  }
}

const char* family_name(Family f) {
  switch (f) {
    case Family::MinDigit: return "mindigit";
    case Family::CountMod: return "countmod";
    case Family::Vowels: return "vowels";
    case Family::SumDigit: return "sumdigit";
    case Family::Parity: return "parity";
    case Family::Smallest: return "smallest";
    case Family::Mostly: return "mostly";
    case Family::Tally: return "tally";
  }
  return "?";
}

Family family_from_name(const std::string& name) {
  for (Family f : {Family::MinDigit, Family::CountMod, Family::Vowels,
                   Family::SumDigit, Family::Parity, Family::Smallest,
                   Family::Mostly, Family::Tally}) {
    if (name == family_name(f)) return f;
  }
  throw std::invalid_argument("unknown task family: " + name);
}

std::vector<std::string> candidates_for(Family f) {
  switch (f) {
    case Family::Parity: return {" 0", " 1"};
    case Family::Smallest: return {" 0", " 1", " 2", " 3"};
    case Family::Mostly: return {" yes", " no"};
    case Family::Tally: return {" 0", " 1", " 2"};
    case Family::MinDigit: return {" 0", " 1", " 2", " 3"};
    case Family::CountMod: return {" 0", " 1", " 2"};
    case Family::Vowels: return {" yes", " no"};
    case Family::SumDigit: return {" 0", " 1", " 2", " 3", " 4"};
  }
  throw std::logic_error("unknown family");
}

std::string solve(Family f, const std::string& instruction) {
  const std::string body = unwrap(instruction);
  const auto cands = candidates_for(f);
  switch (f) {
    case Family::Parity: {
      char c = between(body, "count of ", " in ")[0];
      std::string s = between(body, " in ", " mod 2?");
      return " " + std::to_string(std::count(s.begin(), s.end(), c) % 2);
    }
    case Family::Smallest: {
      std::string d = between(body, "smallest digit of ", "?");
      return " " + std::string(1, *std::min_element(d.begin(), d.end()));
    }
    case Family::Mostly: {
      std::string s = between(body, "mostly vowels in ", "?");
      long nv = std::count_if(s.begin(), s.end(), [](char c) {
        return std::string(kVowels).find(c) != std::string::npos;
      });
      return nv > long(s.size()) - nv ? cands[0] : cands[1];
    }
    case Family::Tally: {
      char c = between(body, "the ", " tally in ")[0];
      std::string s = between(body, " tally in ", " mod 3?");
      return " " + std::to_string(std::count(s.begin(), s.end(), c) % 3);
    }
    case Family::MinDigit: {
      std::string d = last_token(body);
      return " " + std::string(1, *std::min_element(d.begin(), d.end()));
    }
    case Family::CountMod: {
      std::string s = between(body, " in ", " mod 3?");
      return " " + std::to_string(std::count(s.begin(), s.end(), 'x') % 3);
    }
    case Family::Vowels: {
      std::string s = last_token(body);
      long nv = std::count_if(s.begin(), s.end(), [](char c) {
        return std::string(kVowels).find(c) != std::string::npos;
      });
      return nv > long(s.size()) - nv ? cands[0] : cands[1];
    }
    case Family::SumDigit: {
      std::string d = last_token(body);
      int s = 0;
      for (char c : d) s += c - '0';
      return " " + std::to_string(s);
    }
  }
  throw std::logic_error("unknown family");
}

namespace {

Instance make_instance(const TaskSpec& spec, int cls, GaussianRng& rng) {
  Made m = make_body(spec.family, cls, rng);
  Instance inst;
  inst.task_id = spec.task_id;
  inst.instruction = wrap(m.body);
  inst.candidates = candidates_for(spec.family);
  inst.answer = solve(spec.family, inst.instruction);
  if (inst.answer != inst.candidates[size_t(cls)]) {
    throw std::logic_error("instance builder emitted class " +
                           std::to_string(cls) + " but solver says " +
                           inst.answer);
  }
  return inst;
}

}  // namespace

std::vector<Instance> make_domain_dataset(const std::vector<TaskSpec>& families,
                                          int n_per_family, std::uint64_t seed) {
  if (n_per_family < 1) throw std::invalid_argument("n_per_family must be >= 1");
  for (const auto& spec : families) {
    if (!is_domain_family(spec.family)) {
      throw std::invalid_argument(
          std::string("family '") + family_name(spec.family) +
          "' is reserved for customization and cannot enter the domain corpus");
    }
  }
  GaussianRng rng(seed);
  std::vector<Instance> out;
  for (const auto& spec : families) {
    const int k = n_classes(spec.family);
    for (int i = 0; i < n_per_family; ++i) {
      out.push_back(make_instance(spec, i % k, rng));
    }
  }
  // shuffle the pooled corpus
  for (size_t i = out.size() - 1; i > 0; --i) {
    std::swap(out[i], out[rng.below(i + 1)]);
  }
  return out;
}

CustomizationSplit make_customization_task(const TaskSpec& spec, int shots,
                                           int eval_n, std::uint64_t seed) {
  if (shots < 1 || eval_n < 1) {
    throw std::invalid_argument("shots and eval_n must be >= 1");
  }
  if (is_domain_family(spec.family)) {
    throw std::invalid_argument(std::string("family '") +
                                family_name(spec.family) +
                                "' belongs to the domain corpus");
  }
  GaussianRng rng(seed);
  const int k = n_classes(spec.family);
  std::set<std::string> seen;
  auto take = [&](int n, std::vector<Instance>& dst, int cls_offset) {
    for (int i = 0; i < n; ++i) {
      Instance inst;
      int tries = 0;
      do {
        inst = make_instance(spec, (i + cls_offset) % k, rng);
        if (++tries > 1000) {
          throw std::runtime_error("cannot build a duplicate-free split for " +
                                   spec.task_id);
        }
      } while (!seen.insert(inst.instruction).second);
      dst.push_back(inst);
    }
  };
  CustomizationSplit split;
  take(shots, split.shots, 0);
  take(eval_n, split.eval, shots);
  return split;
}

lm::Example to_example(const Instance& inst) {
  return to_example(inst, inst.answer);
}

lm::Example to_example(const Instance& inst, const std::string& candidate) {
  lm::Example ex;
  ex.instruction_ids.ids = lm::Tokenizer::encode(inst.instruction);
  ex.answer_ids.ids = lm::Tokenizer::encode(candidate);
  return ex;
}

void write_jsonl(const std::string& path, const std::vector<Instance>& set) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for write");
  for (const auto& inst : set) {
    nlohmann::json j{{"task_id", inst.task_id},
                     {"instruction", inst.instruction},
                     {"answer", inst.answer},
                     {"candidates", inst.candidates}};
    os << j.dump() << "\n";
  }
}

std::vector<Instance> read_jsonl(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::vector<Instance> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    Instance inst;
    inst.task_id = j.at("task_id").get<std::string>();
    inst.instruction = j.at("instruction").get<std::string>();
    inst.answer = j.at("answer").get<std::string>();
    inst.candidates = j.at("candidates").get<std::vector<std::string>>();
    out.push_back(std::move(inst));
  }
  return out;
}

}  // namespace cbp::data

// mdvae: multi-decoder conditional VAE for molecular string generation
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mdvae::smiles {

// 39 SMILES symbols of the ZINC vocabulary plus BOS/EOS/PAD.
class Vocabulary {
 public:
  static constexpr int kNumSymbols = 39;
  static constexpr int kSize = 42;

  Vocabulary() {
    static const char* kSymbols[kNumSymbols] = {
        "1", "2", "3", "4", "5", "6", "7", "8", "9",
        "+", "-", "=", "#", "(", ")", "[", "]",
        "H", "B", "C", "N", "O", "F", "Si", "P", "S",
        "Cl", "Br", "Sn", "I",
        "c", "n", "o", "p", "s",
        "\\", "/", "@", "@@"};
    for (int i = 0; i < kNumSymbols; ++i) tokens_.emplace_back(kSymbols[i]);
    tokens_.emplace_back("<bos>");
    tokens_.emplace_back("<eos>");
    tokens_.emplace_back("<pad>");
    for (int i = 0; i < kSize; ++i) token_to_id_[tokens_[i]] = i;
  }

  static const Vocabulary& instance() {
    static Vocabulary v;
    return v;
  }

  int bos() const { return kNumSymbols; }
  int eos() const { return kNumSymbols + 1; }
  int pad() const { return kNumSymbols + 2; }
  int size() const { return kSize; }

  const std::string& text(int id) const { return tokens_.at(id); }

  std::optional<int> id(std::string_view tok) const {
    auto it = token_to_id_.find(std::string(tok));
    if (it == token_to_id_.end()) return std::nullopt;
    return it->second;
  }

  bool is_special(int id) const { return id >= kNumSymbols; }

  // Longest vocabulary symbol matching s at `pos`, or nullopt.
  std::optional<int> longest_match(std::string_view s, size_t pos) const {
    // multi-char symbols are all length 2 (Cl, Br, Si, Sn, @@)
    if (pos + 2 <= s.size()) {
      if (auto two = id(s.substr(pos, 2)); two.has_value()) return two;
    }
    if (pos < s.size()) {
      if (auto one = id(s.substr(pos, 1)); one.has_value()) return one;
    }
    return std::nullopt;
  }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int, std::less<>> token_to_id_;
};

struct TokenSeq {
  std::vector<int> ids;
  bool framed = false;
};

enum class Failure {
  kUnknownToken,
  kUnbalancedParen,
  kUnbalancedBracket,
  kUnmatchedRingBond,
  kEmpty,
  kValenceViolation,
};

inline const char* failure_name(Failure f) {
  switch (f) {
    case Failure::kUnknownToken: return "UNKNOWN_TOKEN";
    case Failure::kUnbalancedParen: return "UNBALANCED_PAREN";
    case Failure::kUnbalancedBracket: return "UNBALANCED_BRACKET";
    case Failure::kUnmatchedRingBond: return "UNMATCHED_RING_BOND";
    case Failure::kEmpty: return "EMPTY";
    case Failure::kValenceViolation: return "VALENCE_VIOLATION";
  }
  return "?";
}

struct ValidityReport {
  bool valid = true;
  std::vector<Failure> reasons;

  void fail(Failure f) {
    valid = false;
    reasons.push_back(f);
  }
};

// Greedy longest-match tokenization; multi-char symbols win over their
// prefixes. Returns nullopt if some position matches no symbol.
inline std::optional<TokenSeq> tokenize(std::string_view s) {
  const auto& vocab = Vocabulary::instance();
  TokenSeq out;
  size_t pos = 0;
  while (pos < s.size()) {
    auto m = vocab.longest_match(s, pos);
    if (!m.has_value()) return std::nullopt;
    out.ids.push_back(*m);
    pos += vocab.text(*m).size();
  }
  return out;
}

inline std::string detokenize(const TokenSeq& t) {
  const auto& vocab = Vocabulary::instance();
  std::string out;
  for (int id : t.ids) {
    if (vocab.is_special(id)) continue;
    out += vocab.text(id);
  }
  return out;
}

inline TokenSeq frame(TokenSeq t, size_t pad_to = 0) {
  const auto& vocab = Vocabulary::instance();
  TokenSeq out;
  out.framed = true;
  out.ids.reserve(t.ids.size() + 2);
  out.ids.push_back(vocab.bos());
  out.ids.insert(out.ids.end(), t.ids.begin(), t.ids.end());
  out.ids.push_back(vocab.eos());
  while (out.ids.size() < pad_to) out.ids.push_back(vocab.pad());
  return out;
}

namespace detail {

struct Element {
  const char* symbol;
  double weight;      // IUPAC 2021 standard atomic weights
  int valence;        // default valence used for implicit hydrogen fill
  bool organic_aromatic;  // may appear lowercase
};

inline const std::vector<Element>& elements() {
  static const std::vector<Element> kTable = {
      {"H", 1.008, 1, false},   {"B", 10.81, 3, false},
      {"C", 12.011, 4, true},   {"N", 14.007, 3, true},
      {"O", 15.999, 2, true},   {"F", 18.998, 1, false},
      {"Si", 28.085, 4, false}, {"P", 30.974, 3, true},
      {"S", 32.06, 2, true},    {"Cl", 35.45, 1, false},
      {"Br", 79.904, 1, false}, {"Sn", 118.71, 4, false},
      {"I", 126.904, 1, false},
  };
  return kTable;
}

inline const Element* find_element(std::string_view sym, bool* aromatic) {
  *aromatic = !sym.empty() && std::islower(static_cast<unsigned char>(sym[0]));
  std::string upper(sym);
  upper[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(upper[0])));
  for (const auto& e : elements()) {
    if (upper == e.symbol) {
      if (*aromatic && !e.organic_aromatic) return nullptr;
      return &e;
    }
  }
  return nullptr;
}

struct Atom {
  const Element* element = nullptr;
  bool aromatic = false;
  bool bracket = false;
  int explicit_h = 0;   // bracket atoms only
  double bond_sum = 0;  // aromatic bonds count 1.5
};

// Parsed structural skeleton: atoms with accumulated bond orders.
// Returns failure code on structural errors.
struct ParseResult {
  std::vector<Atom> atoms;
  std::optional<Failure> error;
};

inline ParseResult parse_atoms(const TokenSeq& seq) {
  const auto& vocab = Vocabulary::instance();
  ParseResult res;
  std::vector<int> branch_stack;          // previous-atom index at '('
  std::map<int, int> open_rings;          // ring label -> atom index
  int prev = -1;
  double pending_bond = 0;                // 0 = default
  size_t i = 0;
  const auto& ids = seq.ids;

  auto bond_order = [&](const Atom& a, const Atom& b) -> double {
    if (pending_bond > 0) {
      double o = pending_bond;
      return o;
    }
    return (a.aromatic && b.aromatic) ? 1.5 : 1.0;
  };

  auto attach = [&](int idx) {
    if (prev >= 0) {
      double o = bond_order(res.atoms[prev], res.atoms[idx]);
      res.atoms[prev].bond_sum += o;
      res.atoms[idx].bond_sum += o;
    }
    pending_bond = 0;
    prev = idx;
  };

  while (i < ids.size()) {
    int id = ids[i];
    if (vocab.is_special(id)) { ++i; continue; }
    const std::string& tok = vocab.text(id);
    char c0 = tok[0];
    if (c0 == '(') {
      if (prev < 0) return {{}, Failure::kUnbalancedParen};
      branch_stack.push_back(prev);
      ++i;
    } else if (c0 == ')') {
      if (branch_stack.empty()) return {{}, Failure::kUnbalancedParen};
      prev = branch_stack.back();
      branch_stack.pop_back();
      ++i;
    } else if (c0 == '=') {
      pending_bond = 2;
      ++i;
    } else if (c0 == '#') {
      pending_bond = 3;
      ++i;
    } else if (c0 == '/' || c0 == '\\') {
      // stereo bond markers: plain single bonds here
      ++i;
    } else if (c0 >= '1' && c0 <= '9') {
      int label = c0 - '0';
      if (prev < 0) return {{}, Failure::kUnmatchedRingBond};
      auto it = open_rings.find(label);
      if (it == open_rings.end()) {
        open_rings[label] = prev;
      } else {
        int other = it->second;
        open_rings.erase(it);
        double o = pending_bond > 0 ? pending_bond
                   : (res.atoms[prev].aromatic && res.atoms[other].aromatic)
                       ? 1.5
                       : 1.0;
        res.atoms[prev].bond_sum += o;
        res.atoms[other].bond_sum += o;
      }
      pending_bond = 0;
      ++i;
    } else if (c0 == '[') {
      // bracket atom: [ (H|element) (@|@@)* (H (count)?)? (+|-)(count)? ]
      ++i;
      Atom atom;
      atom.bracket = true;
      if (i >= ids.size()) return {{}, Failure::kUnbalancedBracket};
      bool aromatic = false;
      const Element* el = find_element(vocab.text(ids[i]), &aromatic);
      if (el == nullptr) return {{}, Failure::kUnknownToken};
      atom.element = el;
      atom.aromatic = aromatic;
      ++i;
      bool h_for_hydrogen_atom = (el->symbol == std::string("H"));
      while (i < ids.size() && vocab.text(ids[i]) != "]") {
        const std::string& t = vocab.text(ids[i]);
        if (t == "@" || t == "@@") {
          ++i;
        } else if (t == "H" && !h_for_hydrogen_atom) {
          int count = 1;
          ++i;
          if (i < ids.size() && vocab.text(ids[i]).size() == 1 &&
              vocab.text(ids[i])[0] >= '1' && vocab.text(ids[i])[0] <= '9') {
            count = vocab.text(ids[i])[0] - '0';
            ++i;
          }
          atom.explicit_h += count;
        } else if (t == "+" || t == "-") {
          ++i;
          if (i < ids.size() && vocab.text(ids[i]).size() == 1 &&
              vocab.text(ids[i])[0] >= '1' && vocab.text(ids[i])[0] <= '9') {
            ++i;
          }
        } else {
          return {{}, Failure::kUnknownToken};
        }
      }
      if (i >= ids.size()) return {{}, Failure::kUnbalancedBracket};
      ++i;  // ']'
      res.atoms.push_back(atom);
      attach(static_cast<int>(res.atoms.size()) - 1);
    } else if (c0 == ']') {
      return {{}, Failure::kUnbalancedBracket};
    } else {
      bool aromatic = false;
      const Element* el = find_element(tok, &aromatic);
      if (el == nullptr) return {{}, Failure::kUnknownToken};
      Atom atom;
      atom.element = el;
      atom.aromatic = aromatic;
      res.atoms.push_back(atom);
      attach(static_cast<int>(res.atoms.size()) - 1);
      ++i;
    }
  }
  if (!branch_stack.empty()) return {{}, Failure::kUnbalancedParen};
  if (!open_rings.empty()) return {{}, Failure::kUnmatchedRingBond};
  return res;
}

}  // namespace detail

// Structural validity check. This is an approximation of a full chemistry
// toolkit's sanitization: tokenizability, balanced parens/brackets, paired
// ring-bond labels, non-emptiness, and (in strict mode) a valence check
// against the organic-subset max-bond table.
inline ValidityReport check_validity(std::string_view s, bool strict_valence = false) {
  const auto& vocab = Vocabulary::instance();
  ValidityReport rep;
  if (s.empty()) {
    rep.fail(Failure::kEmpty);
    return rep;
  }
  auto toks = tokenize(s);
  if (!toks.has_value()) {
    rep.fail(Failure::kUnknownToken);
    return rep;
  }

  int paren_depth = 0;
  int bracket_depth = 0;
  std::map<int, int> ring_counts;
  for (int id : toks->ids) {
    const std::string& t = vocab.text(id);
    if (t == "(") ++paren_depth;
    else if (t == ")") --paren_depth;
    else if (t == "[") ++bracket_depth;
    else if (t == "]") --bracket_depth;
    else if (t.size() == 1 && t[0] >= '1' && t[0] <= '9' && bracket_depth == 0)
      ++ring_counts[t[0] - '0'];
    if (paren_depth < 0) break;
    if (bracket_depth < 0) break;
  }
  if (paren_depth != 0) rep.fail(Failure::kUnbalancedParen);
  if (bracket_depth != 0) rep.fail(Failure::kUnbalancedBracket);
  if (bracket_depth == 0) {
    for (const auto& [label, count] : ring_counts)
      if (count % 2 != 0) {
        rep.fail(Failure::kUnmatchedRingBond);
        break;
      }
  }
  if (!rep.valid) return rep;

  auto parsed = detail::parse_atoms(*toks);
  if (parsed.error.has_value()) {
    rep.fail(*parsed.error);
    return rep;
  }
  if (parsed.atoms.empty()) {
    rep.fail(Failure::kEmpty);
    return rep;
  }
  if (strict_valence) {
    for (const auto& a : parsed.atoms) {
      if (a.bracket) continue;  // explicit H counts, no fill to check
      int used = static_cast<int>(std::ceil(a.bond_sum - 1e-9));
      if (used > a.element->valence) {
        rep.fail(Failure::kValenceViolation);
        break;
      }
    }
  }
  return rep;
}

constexpr double kHydrogenWeight = 1.008;

// Molecular weight in g/mol: explicit atoms plus implicit hydrogens filled
// to the default valence (bracket atoms take their explicit H count only).
// Aromatic-aromatic bonds count 1.5 toward used valence.
inline std::optional<double> molecular_weight(std::string_view s) {
  auto toks = tokenize(s);
  if (!toks.has_value()) return std::nullopt;
  auto parsed = detail::parse_atoms(*toks);
  if (parsed.error.has_value() || parsed.atoms.empty()) return std::nullopt;
  double total = 0;
  for (const auto& a : parsed.atoms) {
    total += a.element->weight;
    if (a.bracket) {
      total += a.explicit_h * kHydrogenWeight;
    } else {
      int used = static_cast<int>(std::ceil(a.bond_sum - 1e-9));
      int implicit_h = std::max(0, a.element->valence - used);
      total += implicit_h * kHydrogenWeight;
    }
  }
  return total;
}

}  // namespace mdvae::smiles

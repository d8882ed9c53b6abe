// SPDX-License-Identifier: Apache-2.0

#include "bflab/vocab.hpp"

#include <algorithm>
#include <sstream>

#include "bflab/error.hpp"

namespace bflab::agent {

Vocabulary::Vocabulary() {
  pad = add("<pad>");
  bos = add("<bos>");
  end = add("END");
  prompt = add("PROMPT");
  history = add("HISTORY");
  tools_marker = add("TOOLS");
  response = add("RESPONSE");
  plan = add("PLAN");
  act = add("ACT");
  summarize = add("SUMMARIZE");
  search = add("SEARCH");
  brand = add("BRAND");
  call = add("CALL");
  recommend = add("RECOMMEND");
  any = add("any");
  add_all({"i", "want", "to", "buy", "for", "running", "work", "kids",
           "travel", "school", "hiking", "the", "summer", "winter", "please",
           "today", "as", "a", "gift", "quickly"});
  adjectives_ = add_all({"red", "blue", "black", "white", "green", "cheap",
                         "light", "warm", "comfy", "sturdy"});
  products_ = add_all({"sneakers", "shirts", "shorts", "jackets", "socks",
                       "hats", "boots", "bags", "jeans", "scarves", "gloves",
                       "sandals"});
  vendors_ = add_all({"nike", "adidas", "puma", "reebok", "asics", "fila",
                      "vans", "converse", "umbro", "kappa"});
  tools_ = add_all({"shop-alpha", "shop-beta", "shop-gamma", "shop-delta",
                    "shop-epsilon", "shop-zeta"});
  prices_ = add_all({"$10", "$20", "$35", "$50", "$80", "$120"});
  ratings_ = add_all({"rated-1", "rated-2", "rated-3", "rated-4", "rated-5"});
}

int Vocabulary::add(std::string w) {
  const int id = static_cast<int>(words_.size());
  ids_.emplace(w, id);
  words_.push_back(std::move(w));
  return id;
}

std::vector<int> Vocabulary::add_all(std::initializer_list<const char*> ws) {
  std::vector<int> out;
  for (const char* w : ws) out.push_back(add(w));
  return out;
}

int Vocabulary::id(std::string_view word) const {
  auto it = ids_.find(std::string(word));
  if (it == ids_.end()) {
    throw IndexError("unknown token '" + std::string(word) + "'");
  }
  return it->second;
}

bool Vocabulary::contains(std::string_view word) const {
  return ids_.count(std::string(word)) > 0;
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    static const std::string unknown = "<unk>";
    return unknown;
  }
  return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::istringstream is{std::string(text)};
  std::vector<int> out;
  std::string w;
  while (is >> w) out.push_back(id(w));
  return out;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += word(ids[i]);
  }
  return out;
}

namespace {
bool in(std::span<const int> set, int id) {
  return std::find(set.begin(), set.end(), id) != set.end();
}
}  // namespace

bool Vocabulary::is_vendor(int id) const { return in(vendors_, id); }
bool Vocabulary::is_product(int id) const { return in(products_, id); }
bool Vocabulary::is_tool(int id) const { return in(tools_, id); }
bool Vocabulary::is_adjective(int id) const { return in(adjectives_, id); }

const Vocabulary& vocabulary() {
  static const Vocabulary v;
  return v;
}

}  // namespace bflab::agent

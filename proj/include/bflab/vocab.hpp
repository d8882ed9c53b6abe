// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace bflab::agent {

// Fixed word-level token table of the shopping-agent world. Ids are stable:
// specials first, then each word class in declaration order.
class Vocabulary {
 public:
  Vocabulary();

  std::size_t size() const { return words_.size(); }
  int id(std::string_view word) const;  // throws IndexError if unknown
  bool contains(std::string_view word) const;
  const std::string& word(int id) const;

  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

  std::span<const int> vendors() const { return vendors_; }
  std::span<const int> products() const { return products_; }
  std::span<const int> tools() const { return tools_; }
  std::span<const int> adjectives() const { return adjectives_; }
  std::span<const int> prices() const { return prices_; }
  std::span<const int> ratings() const { return ratings_; }

  bool is_vendor(int id) const;
  bool is_product(int id) const;
  bool is_tool(int id) const;
  bool is_adjective(int id) const;

  // Special and structural tokens.
  int pad, bos, end, prompt, history, tools_marker, response, plan, act,
      summarize, search, brand, call, recommend, any;

 private:
  int add(std::string w);
  std::vector<int> add_all(std::initializer_list<const char*> ws);

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
  std::vector<int> vendors_, products_, tools_, adjectives_, prices_, ratings_;
};

const Vocabulary& vocabulary();

}  // namespace bflab::agent

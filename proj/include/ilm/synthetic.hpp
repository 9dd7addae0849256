#pragma once

// Deterministic generator of short templated stories: a title line followed
// by five sentences. Story-level choices (who, what, where, when) recur in
// several sentences, so a masked sentence is predictable from context on both
// sides but only partly from either side alone.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "ilm/corpus.hpp"
#include "ilm/rng.hpp"

namespace ilm::synthetic {

namespace lists {
inline constexpr std::array<std::string_view, 16> kNames = {
    "Anna", "Ben", "Carla", "David", "Emma", "Frank", "Grace", "Henry",
    "Ivy",  "Jack", "Kate", "Leo",  "Maria", "Nick", "Olivia", "Peter"};
inline constexpr std::array<std::string_view, 12> kItems = {
    "bike", "hat", "lamp", "guitar", "kite", "book", "coat", "clock", "boat", "cake", "chair", "camera"};
inline constexpr std::array<std::string_view, 8> kAdjectives = {
    "red", "blue", "green", "yellow", "tiny", "huge", "shiny", "old"};
inline constexpr std::array<std::string_view, 8> kPlaces = {
    "market", "mall", "park", "store", "fair", "garage", "museum", "station"};
inline constexpr std::array<std::string_view, 6> kEvents = {
    "party", "trip", "wedding", "picnic", "game", "concert"};
inline constexpr std::array<std::string_view, 7> kDays = {
    "Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"};
inline constexpr std::array<std::string_view, 8> kNumbers = {
    "two", "three", "four", "five", "six", "seven", "eight", "ten"};
}  // namespace lists

struct Story {
  std::string title;
  std::array<std::string, 5> sentences;

  std::string text() const {
    std::string out = title + "\n";
    for (std::size_t i = 0; i < sentences.size(); ++i) {
      if (i) out += ' ';
      out += sentences[i];
    }
    return out;
  }
};

template <std::size_t N>
std::string_view pick(const std::array<std::string_view, N>& a, Rng& rng) {
  return a[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(N) - 1))];
}

inline Story make_story(Rng& rng) {
  const std::string name(pick(lists::kNames, rng));
  std::string friend_name(pick(lists::kNames, rng));
  while (friend_name == name) friend_name = std::string(pick(lists::kNames, rng));
  const std::string item(pick(lists::kItems, rng));
  const std::string adj(pick(lists::kAdjectives, rng));
  const std::string place(pick(lists::kPlaces, rng));
  const std::string event(pick(lists::kEvents, rng));
  const std::string day(pick(lists::kDays, rng));
  const std::string number(pick(lists::kNumbers, rng));
  auto variant = [&](int n) { return static_cast<int>(rng.uniform_int(0, n - 1)); };

  Story s;
  switch (variant(3)) {
    case 0: s.title = name + " and the " + adj + " " + item; break;
    case 1: s.title = "The " + adj + " " + item; break;
    default: s.title = "A " + item + " for " + name; break;
  }
  switch (variant(3)) {
    case 0: s.sentences[0] = name + " wanted a new " + item + " for the " + event + "."; break;
    case 1: s.sentences[0] = name + " needed a " + item + " before the " + event + "."; break;
    default: s.sentences[0] = "The " + event + " was soon, and " + name + " had no " + item + "."; break;
  }
  switch (variant(2)) {
    case 0: s.sentences[1] = "On " + day + ", " + name + " went to the " + place + " with " + friend_name + "."; break;
    default: s.sentences[1] = name + " and " + friend_name + " drove to the " + place + " on " + day + "."; break;
  }
  switch (variant(2)) {
    case 0: s.sentences[2] = friend_name + " found a " + adj + " " + item + " at the " + place + "."; break;
    default: s.sentences[2] = "At the " + place + ", " + friend_name + " saw a " + adj + " " + item + "."; break;
  }
  switch (variant(2)) {
    case 0: s.sentences[3] = "It cost " + number + " dollars, so " + name + " bought it that " + day + "."; break;
    default: s.sentences[3] = name + " paid " + number + " dollars for the " + item + " on " + day + "."; break;
  }
  switch (variant(3)) {
    case 0: s.sentences[4] = "At the " + event + ", everyone loved the " + adj + " " + item + "."; break;
    case 1: s.sentences[4] = name + " took the " + adj + " " + item + " to the " + event + "."; break;
    default: s.sentences[4] = "The " + adj + " " + item + " from the " + place + " made the " + event + " fun."; break;
  }
  return s;
}

// `count` stories; story i uses generator stream (seed, i). Documents carry
// the title as their first paragraph.
inline std::vector<Document> make_corpus(std::size_t count, std::uint64_t seed,
                                         const std::string& id_prefix = "story") {
  std::vector<Document> docs;
  docs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, i));
    docs.push_back(parse_document(make_story(rng).text(), id_prefix + "-" + std::to_string(i), true));
  }
  return docs;
}

}  // namespace ilm::synthetic

#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "duovid/error.hpp"

namespace duovid {

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by specials.
struct ByteTokenizer {
  static constexpr int bos = 256;
  static constexpr int eos = 257;
  static constexpr int pad = 258;
  static constexpr int sep = 259;
  static constexpr std::size_t vocab_size = 260;

  static std::vector<int> encode(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(c);
    return ids;
  }

  // Specials are dropped.
  static std::string decode(const std::vector<int>& ids) {
    std::string out;
    for (int id : ids)
      if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
    return out;
  }
};

struct ChatTemplate {
  std::string version = "duovid-chat-v1";
  std::string system = "";
  std::string user_prefix = "USER: ";
  std::string assistant_prefix = "\nASSISTANT: ";

  std::string prompt(std::string_view question) const {
    return user_prefix + std::string(question) + assistant_prefix;
  }
};

// One single-turn conversation prepared for teacher forcing: position i sees
// input_ids[i] and is scored on target_ids[i] when loss_mask[i] is set.
struct TokenizedTurn {
  std::vector<int> input_ids;
  std::vector<int> target_ids;
  std::vector<std::uint8_t> loss_mask;

  std::size_t size() const noexcept { return input_ids.size(); }
};

inline TokenizedTurn tokenize_turn(const ChatTemplate& chat, std::string_view question, std::string_view answer) {
  require(!answer.empty(), ErrorKind::invalid_argument, "answer text is empty");
  std::vector<int> full = ByteTokenizer::encode(chat.prompt(question));
  const std::size_t prompt_len = full.size();
  for (int id : ByteTokenizer::encode(answer)) full.push_back(id);
  full.push_back(ByteTokenizer::eos);
  TokenizedTurn turn;
  for (std::size_t i = 0; i + 1 < full.size(); ++i) {
    turn.input_ids.push_back(full[i]);
    turn.target_ids.push_back(full[i + 1]);
    turn.loss_mask.push_back(i + 1 >= prompt_len ? 1 : 0);
  }
  return turn;
}

}  // namespace duovid

#pragma once

#include <cstdint>
#include <vector>

namespace sinkdoor {

using Token = std::uint32_t;
using Tokens = std::vector<Token>;

// Reserved ids shared by the tokenizer and the model.
inline constexpr Token kBos = 0;
inline constexpr Token kEos = 1;
inline constexpr Token kPad = 2;
inline constexpr Token kUnk = 3;
inline constexpr Token kNumReserved = 4;

}  // namespace sinkdoor

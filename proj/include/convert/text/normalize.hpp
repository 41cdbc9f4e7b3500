#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <unicode/locid.h>
#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/utf8.h>

#include "convert/error.hpp"

namespace convert::text {

// NFKC, lowercase, every Unicode white space run collapsed to one ASCII
// space, ends trimmed.
inline std::string normalize(std::string_view input) {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* nfkc = icu::Normalizer2::getNFKCInstance(status);
  if (U_FAILURE(status)) fail(ErrorCode::config, "ICU NFKC normalizer unavailable");

  icu::UnicodeString source = icu::UnicodeString::fromUTF8(
      icu::StringPiece(input.data(), static_cast<int32_t>(input.size())));
  icu::UnicodeString folded = nfkc->normalize(source, status);
  if (U_FAILURE(status)) fail(ErrorCode::data, "unicode normalization failed");
  folded.toLower(icu::Locale::getRoot());

  icu::UnicodeString collapsed;
  bool pending_space = false;
  for (int32_t i = 0; i < folded.length();) {
    const UChar32 c = folded.char32At(i);
    i += U16_LENGTH(c);
    if (u_isUWhiteSpace(c) || u_isWhitespace(c)) {
      pending_space = !collapsed.isEmpty();
      continue;
    }
    if (pending_space) collapsed.append(UChar32(' '));
    pending_space = false;
    collapsed.append(c);
  }
  std::string out;
  collapsed.toUTF8String(out);
  return out;
}

// Splits UTF-8 into code points, each returned as its own UTF-8 string.
// Ill-formed sequences become U+FFFD.
inline std::vector<std::string> code_points(std::string_view utf8) {
  std::vector<std::string> out;
  const auto* bytes = reinterpret_cast<const uint8_t*>(utf8.data());
  const int32_t length = static_cast<int32_t>(utf8.size());
  int32_t i = 0;
  while (i < length) {
    const int32_t start = i;
    UChar32 c;
    U8_NEXT(bytes, i, length, c);
    if (c < 0) {
      out.emplace_back("\xEF\xBF\xBD");
    } else {
      out.emplace_back(utf8.substr(start, i - start));
    }
  }
  return out;
}

// Splits on single ASCII spaces, as produced by normalize().
inline std::vector<std::string_view> split_words(std::string_view normalized) {
  std::vector<std::string_view> words;
  std::size_t pos = 0;
  while (pos < normalized.size()) {
    std::size_t next = normalized.find(' ', pos);
    if (next == std::string_view::npos) next = normalized.size();
    if (next > pos) words.push_back(normalized.substr(pos, next - pos));
    pos = next + 1;
  }
  return words;
}

}  // namespace convert::text

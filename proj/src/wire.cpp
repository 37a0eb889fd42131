#include "psx/wire.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>

#include "psx/error.hpp"

namespace psx {

static_assert(std::endian::native == std::endian::little, "wire format assumes a little-endian host");

std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int written = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                      reinterpret_cast<const unsigned char*>(bytes.data()),
                                      static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(written));
  return out;
}

std::string base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) fail(ErrorCode::format, "base64 length must be a multiple of 4");
  std::string out(3 * (text.size() / 4) + 1, '\0');
  const int written = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                      reinterpret_cast<const unsigned char*>(text.data()),
                                      static_cast<int>(text.size()));
  if (written < 0) fail(ErrorCode::format, "malformed base64 data");
  // EVP_DecodeBlock counts padding characters as zero bytes
  std::size_t padding = 0;
  if (!text.empty() && text.back() == '=') ++padding;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++padding;
  out.resize(static_cast<std::size_t>(written) - padding);
  return out;
}

nlohmann::json encode_tensor(const Tensor& tensor) {
  const auto values = tensor.values();
  const std::string_view bytes(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(float));
  return {{"shape", tensor.shape()}, {"data", base64_encode(bytes)}};
}

Tensor decode_tensor(const nlohmann::json& value) {
  if (!value.is_object() || !value.contains("shape") || !value.contains("data")) {
    fail(ErrorCode::format, "image must be an object with 'shape' and 'data'");
  }
  Shape shape;
  try {
    shape = value.at("shape").get<Shape>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorCode::format, "image shape must be an array of non-negative integers");
  }
  if (!value.at("data").is_string()) fail(ErrorCode::format, "image data must be a base64 string");
  const auto bytes = base64_decode(value.at("data").get<std::string>());
  if (bytes.size() != element_count(shape) * sizeof(float)) {
    fail(ErrorCode::shape_mismatch, "image data holds " + std::to_string(bytes.size() / sizeof(float)) +
                                        " floats but shape " + shape_string(shape) + " needs " +
                                        std::to_string(element_count(shape)));
  }
  std::vector<float> data(element_count(shape));
  std::memcpy(data.data(), bytes.data(), bytes.size());
  Tensor tensor(std::move(shape), std::move(data));
  if (!tensor.all_finite()) fail(ErrorCode::non_finite, "image contains non-finite values");
  return tensor;
}

}  // namespace psx

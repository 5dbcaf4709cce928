#pragma once

// Protocol messages and the TCP frame:
//
//   "FDP1" | u8 type | u32 round | u32 payload length | payload | u32 CRC-32
//
// The CRC covers everything between the magic and the checksum. Payloads:
//
//   JoinReq     short string client id, u32 n_k
//   Broadcast   FDW1 weights
//   Update      short string client id, u32 n_k, u8 has accuracy, f64 accuracy, FDW1 weights
//   StopNotice  FDW1 final weights
//   Error       u8 error kind, short string message

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "fedod/error.hpp"
#include "fedod/fedcore/fedavg.hpp"
#include "fedod/params.hpp"
#include "fedod/wire.hpp"

namespace fedod::fedcore {

enum class MessageType : std::uint8_t { JoinReq = 1, Broadcast = 2, Update = 3, StopNotice = 4, Error = 5 };

constexpr std::string_view to_string(MessageType t) {
    switch (t) {
        case MessageType::JoinReq: return "JoinReq";
        case MessageType::Broadcast: return "Broadcast";
        case MessageType::Update: return "Update";
        case MessageType::StopNotice: return "StopNotice";
        case MessageType::Error: return "Error";
    }
    return "?";
}

struct Message {
    MessageType type = MessageType::Error;
    std::uint32_t round = 0;
    wire::Bytes payload;

    friend bool operator==(const Message&, const Message&) = default;
};

inline constexpr std::string_view kFrameMagic = "FDP1";
inline constexpr std::size_t kFrameHeaderSize = 4 + 1 + 4 + 4;
inline constexpr std::uint32_t kMaxPayload = 256u << 20;

struct JoinRequest {
    std::string client_id;
    std::uint32_t num_samples = 0;
};

struct ErrorNotice {
    ErrorKind kind = ErrorKind::ProtocolViolation;
    std::string message;
};

namespace detail {

inline void require_type(const Message& m, MessageType t) {
    if (m.type != t)
        throw Error(ErrorKind::ProtocolViolation,
                    "expected " + std::string(to_string(t)) + ", got " + std::string(to_string(m.type)));
}

inline void require_consumed(const wire::ByteReader& r) {
    if (r.remaining() != 0) throw Error(ErrorKind::MalformedPayload, "trailing bytes in message payload");
}

}  // namespace detail

inline Message encode_join(const JoinRequest& j) {
    wire::ByteWriter w;
    w.short_string(j.client_id);
    w.u32(j.num_samples);
    return {MessageType::JoinReq, 0, std::move(w).take()};
}

inline JoinRequest decode_join(const Message& m) {
    detail::require_type(m, MessageType::JoinReq);
    wire::ByteReader r(m.payload);
    JoinRequest j;
    j.client_id = r.short_string();
    j.num_samples = r.u32();
    detail::require_consumed(r);
    return j;
}

inline Message encode_weights(MessageType type, std::uint32_t round, const ParamSet& p) {
    return {type, round, serialize(p)};
}

inline ParamSet decode_weights(const Message& m, MessageType type) {
    detail::require_type(m, type);
    return deserialize(m.payload);
}

inline Message encode_update(const ClientUpdate& u) {
    wire::ByteWriter w;
    w.short_string(u.client_id);
    w.u32(u.num_samples);
    w.u8(u.reported_accuracy ? 1 : 0);
    w.f64(u.reported_accuracy.value_or(0.0));
    w.raw(serialize(u.weights));
    return {MessageType::Update, u.round, std::move(w).take()};
}

inline ClientUpdate decode_update(const Message& m) {
    detail::require_type(m, MessageType::Update);
    wire::ByteReader r(m.payload);
    ClientUpdate u;
    u.round = m.round;
    u.client_id = r.short_string();
    u.num_samples = r.u32();
    const auto has_acc = r.u8();
    const double acc = r.f64();
    if (has_acc > 1) throw Error(ErrorKind::MalformedPayload, "accuracy flag must be 0 or 1");
    if (has_acc) u.reported_accuracy = acc;
    u.weights = deserialize(r.raw(r.remaining()));
    return u;
}

inline Message encode_error(std::uint32_t round, const ErrorNotice& e) {
    wire::ByteWriter w;
    w.u8(static_cast<std::uint8_t>(e.kind));
    w.short_string(e.message.size() > 0xFFFF ? e.message.substr(0, 0xFFFF) : e.message);
    return {MessageType::Error, round, std::move(w).take()};
}

inline ErrorNotice decode_error(const Message& m) {
    detail::require_type(m, MessageType::Error);
    wire::ByteReader r(m.payload);
    ErrorNotice e;
    const auto code = r.u8();
    if (code > static_cast<std::uint8_t>(ErrorKind::TransportFailure))
        throw Error(ErrorKind::MalformedPayload, "unknown error kind " + std::to_string(code));
    e.kind = static_cast<ErrorKind>(code);
    e.message = r.short_string();
    detail::require_consumed(r);
    return e;
}

// ---------------------------------------------------------------------------
// Framing
// ---------------------------------------------------------------------------

inline wire::Bytes encode_frame(const Message& m) {
    if (m.payload.size() > kMaxPayload) throw Error(ErrorKind::MalformedPayload, "payload too large");
    wire::ByteWriter w;
    w.raw(kFrameMagic);
    w.u8(static_cast<std::uint8_t>(m.type));
    w.u32(m.round);
    w.u32(static_cast<std::uint32_t>(m.payload.size()));
    w.raw(m.payload);
    const auto& b = w.bytes();
    w.u32(wire::crc32(std::span(b).subspan(kFrameMagic.size())));
    return std::move(w).take();
}

struct FrameHeader {
    MessageType type;
    std::uint32_t round;
    std::uint32_t payload_size;
};

inline FrameHeader decode_frame_header(std::span<const std::uint8_t> header) {
    wire::ByteReader r(header);
    const auto magic = r.raw(kFrameMagic.size());
    if (!std::equal(magic.begin(), magic.end(), kFrameMagic.begin()))
        throw Error(ErrorKind::MalformedPayload, "bad frame magic");
    const auto type = r.u8();
    if (type < 1 || type > 5) throw Error(ErrorKind::MalformedPayload, "unknown message type " + std::to_string(type));
    FrameHeader h{static_cast<MessageType>(type), r.u32(), r.u32()};
    if (h.payload_size > kMaxPayload) throw Error(ErrorKind::MalformedPayload, "payload too large");
    return h;
}

/// Decodes one complete frame; `frame` must hold exactly one.
inline Message decode_frame(std::span<const std::uint8_t> frame) {
    if (frame.size() < kFrameHeaderSize + 4) throw Error(ErrorKind::MalformedPayload, "truncated frame");
    const auto h = decode_frame_header(frame.first(kFrameHeaderSize));
    if (frame.size() != kFrameHeaderSize + h.payload_size + 4)
        throw Error(ErrorKind::MalformedPayload, "frame length does not match header");
    const auto body = frame.subspan(kFrameMagic.size(), frame.size() - kFrameMagic.size() - 4);
    wire::ByteReader tail(frame.last(4));
    if (tail.u32() != wire::crc32(body)) throw Error(ErrorKind::MalformedPayload, "frame checksum mismatch");
    const auto payload = frame.subspan(kFrameHeaderSize, h.payload_size);
    return {h.type, h.round, wire::Bytes(payload.begin(), payload.end())};
}

}  // namespace fedod::fedcore

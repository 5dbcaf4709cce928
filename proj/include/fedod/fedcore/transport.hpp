#pragma once

// Message transports. Both carry complete FDP1 frames, so an in-process run
// exercises the same codec as a loopback TCP run.

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <cstring>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fedod/error.hpp"
#include "fedod/fedcore/protocol.hpp"

namespace fedod::fedcore {

template <typename T>
class BlockingQueue {
public:
    void push(T v) {
        {
            std::lock_guard lock(mu_);
            items_.push_back(std::move(v));
        }
        cv_.notify_one();
    }

    T pop() {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return !items_.empty(); });
        T v = std::move(items_.front());
        items_.pop_front();
        return v;
    }

private:
    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<T> items_;
};

/// Something the server heard on connection `conn`: a message, or the loss
/// of the connection (`message` empty, `failure` says why).
struct Inbound {
    std::size_t conn = 0;
    std::optional<Message> message;
    std::string failure;
};

class ClientChannel {
public:
    virtual ~ClientChannel() = default;
    virtual void send(const Message& m) = 0;
    /// Blocks for the next message; TransportFailure if the link is gone.
    virtual Message recv() = 0;
    virtual void close() = 0;
};

class ServerChannel {
public:
    virtual ~ServerChannel() = default;
    virtual std::size_t connection_count() const = 0;
    virtual void send(std::size_t conn, const Message& m) = 0;
    virtual Inbound recv() = 0;
    virtual void close() = 0;
};

// ---------------------------------------------------------------------------
// In-process
// ---------------------------------------------------------------------------

class InProcessHub : public ServerChannel {
    struct Shared {
        BlockingQueue<Inbound> inbox;
        std::mutex mu;
        std::vector<std::shared_ptr<BlockingQueue<std::optional<wire::Bytes>>>> outboxes;
    };

public:
    class Client : public ClientChannel {
    public:
        Client(std::shared_ptr<Shared> shared, std::size_t conn,
               std::shared_ptr<BlockingQueue<std::optional<wire::Bytes>>> box)
            : shared_(std::move(shared)), conn_(conn), box_(std::move(box)) {}

        ~Client() override { close(); }

        void send(const Message& m) override {
            if (closed_) throw Error(ErrorKind::TransportFailure, "send on closed channel");
            shared_->inbox.push({conn_, decode_frame(encode_frame(m)), {}});
        }

        Message recv() override {
            if (closed_) throw Error(ErrorKind::TransportFailure, "recv on closed channel");
            auto frame = box_->pop();
            if (!frame) throw Error(ErrorKind::TransportFailure, "server closed the connection");
            return decode_frame(*frame);
        }

        void close() override {
            if (closed_) return;
            closed_ = true;
            shared_->inbox.push({conn_, std::nullopt, "client closed the connection"});
        }

    private:
        std::shared_ptr<Shared> shared_;
        std::size_t conn_;
        std::shared_ptr<BlockingQueue<std::optional<wire::Bytes>>> box_;
        bool closed_ = false;
    };

    InProcessHub() : shared_(std::make_shared<Shared>()) {}
    ~InProcessHub() override { close(); }

    std::unique_ptr<ClientChannel> connect() {
        std::lock_guard lock(shared_->mu);
        auto box = std::make_shared<BlockingQueue<std::optional<wire::Bytes>>>();
        shared_->outboxes.push_back(box);
        return std::make_unique<Client>(shared_, shared_->outboxes.size() - 1, box);
    }

    std::size_t connection_count() const override {
        std::lock_guard lock(shared_->mu);
        return shared_->outboxes.size();
    }

    void send(std::size_t conn, const Message& m) override {
        std::lock_guard lock(shared_->mu);
        if (conn >= shared_->outboxes.size()) throw Error(ErrorKind::TransportFailure, "no such connection");
        shared_->outboxes[conn]->push(encode_frame(m));
    }

    Inbound recv() override { return shared_->inbox.pop(); }

    void close() override {
        std::lock_guard lock(shared_->mu);
        if (closed_) return;
        closed_ = true;
        for (auto& box : shared_->outboxes) box->push(std::nullopt);
    }

private:
    std::shared_ptr<Shared> shared_;
    bool closed_ = false;
};

// ---------------------------------------------------------------------------
// TCP
// ---------------------------------------------------------------------------

struct Endpoint {
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;

    std::string str() const { return host + ":" + std::to_string(port); }
};

/// "host", "host:port" or ":port".
inline Endpoint parse_endpoint(const std::string& text, std::uint16_t default_port = 0) {
    Endpoint e;
    e.port = default_port;
    const auto colon = text.rfind(':');
    std::string host = colon == std::string::npos ? text : text.substr(0, colon);
    if (colon != std::string::npos) {
        const std::string port = text.substr(colon + 1);
        char* end = nullptr;
        const long v = std::strtol(port.c_str(), &end, 10);
        if (port.empty() || *end != '\0' || v < 0 || v > 65535)
            throw Error(ErrorKind::ConfigInvalid, "bad port in bind address '" + text + "'");
        e.port = static_cast<std::uint16_t>(v);
    }
    if (!host.empty()) e.host = host;
    return e;
}

/// Bind address: explicit value, else FEDOD_BIND, else 127.0.0.1 with an
/// ephemeral port.
inline Endpoint resolve_bind(const std::optional<std::string>& explicit_bind) {
    if (explicit_bind && !explicit_bind->empty()) return parse_endpoint(*explicit_bind);
    if (const char* env = std::getenv("FEDOD_BIND"); env && *env) return parse_endpoint(env);
    return {};
}

namespace detail {

[[noreturn]] inline void sys_fail(const std::string& what) {
    throw Error(ErrorKind::TransportFailure, what + ": " + std::strerror(errno));
}

class Fd {
public:
    Fd() = default;
    explicit Fd(int fd) : fd_(fd) {}
    Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
    Fd& operator=(Fd&& o) noexcept {
        if (this != &o) {
            reset();
            fd_ = std::exchange(o.fd_, -1);
        }
        return *this;
    }
    ~Fd() { reset(); }

    int get() const { return fd_; }
    void reset() {
        if (fd_ >= 0) ::close(fd_);
        fd_ = -1;
    }

private:
    int fd_ = -1;
};

inline sockaddr_in to_sockaddr(const Endpoint& e) {
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(e.port);
    if (::inet_pton(AF_INET, e.host.c_str(), &addr.sin_addr) == 1) return addr;
    addrinfo hints{};
    hints.ai_family = AF_INET;
    addrinfo* res = nullptr;
    if (::getaddrinfo(e.host.c_str(), nullptr, &hints, &res) != 0 || !res)
        throw Error(ErrorKind::TransportFailure, "cannot resolve host '" + e.host + "'");
    addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
    ::freeaddrinfo(res);
    return addr;
}

inline void write_all(int fd, std::span<const std::uint8_t> data) {
    std::size_t off = 0;
    while (off < data.size()) {
        const auto n = ::send(fd, data.data() + off, data.size() - off, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            sys_fail("send failed");
        }
        off += static_cast<std::size_t>(n);
    }
}

inline void read_exact(int fd, std::uint8_t* dst, std::size_t n) {
    std::size_t off = 0;
    while (off < n) {
        const auto got = ::recv(fd, dst + off, n - off, 0);
        if (got == 0) throw Error(ErrorKind::TransportFailure, "connection closed by peer");
        if (got < 0) {
            if (errno == EINTR) continue;
            sys_fail("recv failed");
        }
        off += static_cast<std::size_t>(got);
    }
}

inline Message read_frame(int fd) {
    wire::Bytes frame(kFrameHeaderSize);
    read_exact(fd, frame.data(), kFrameHeaderSize);
    const auto h = decode_frame_header(frame);
    frame.resize(kFrameHeaderSize + h.payload_size + 4);
    read_exact(fd, frame.data() + kFrameHeaderSize, h.payload_size + 4);
    return decode_frame(frame);
}

inline void set_nodelay(int fd) {
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

}  // namespace detail

class TcpClientChannel : public ClientChannel {
public:
    /// Connects, retrying until `timeout` while the server comes up.
    explicit TcpClientChannel(const Endpoint& server,
                              std::chrono::milliseconds timeout = std::chrono::seconds(30)) {
        const auto addr = detail::to_sockaddr(server);
        const auto deadline = std::chrono::steady_clock::now() + timeout;
        for (;;) {
            detail::Fd fd(::socket(AF_INET, SOCK_STREAM, 0));
            if (fd.get() < 0) detail::sys_fail("socket failed");
            if (::connect(fd.get(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) == 0) {
                detail::set_nodelay(fd.get());
                fd_ = std::move(fd);
                return;
            }
            if (std::chrono::steady_clock::now() >= deadline)
                detail::sys_fail("cannot connect to " + server.str());
            std::this_thread::sleep_for(std::chrono::milliseconds(50));
        }
    }

    ~TcpClientChannel() override { close(); }

    void send(const Message& m) override {
        if (fd_.get() < 0) throw Error(ErrorKind::TransportFailure, "send on closed channel");
        detail::write_all(fd_.get(), encode_frame(m));
    }

    Message recv() override {
        if (fd_.get() < 0) throw Error(ErrorKind::TransportFailure, "recv on closed channel");
        return detail::read_frame(fd_.get());
    }

    void close() override {
        if (fd_.get() >= 0) ::shutdown(fd_.get(), SHUT_RDWR);
        fd_.reset();
    }

private:
    detail::Fd fd_;
};

/// Listening server; each accepted connection gets a reader thread that
/// feeds one shared inbox, so server_step calls stay serialized.
class TcpServerChannel : public ServerChannel {
public:
    explicit TcpServerChannel(const Endpoint& bind) {
        listen_ = detail::Fd(::socket(AF_INET, SOCK_STREAM, 0));
        if (listen_.get() < 0) detail::sys_fail("socket failed");
        int one = 1;
        ::setsockopt(listen_.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
        const auto addr = detail::to_sockaddr(bind);
        if (::bind(listen_.get(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0)
            detail::sys_fail("cannot bind " + bind.str());
        if (::listen(listen_.get(), 64) != 0) detail::sys_fail("listen failed");
        sockaddr_in actual{};
        socklen_t len = sizeof actual;
        ::getsockname(listen_.get(), reinterpret_cast<sockaddr*>(&actual), &len);
        local_ = {bind.host, ntohs(actual.sin_port)};
    }

    ~TcpServerChannel() override { close(); }

    Endpoint local_endpoint() const { return local_; }

    /// Accepts `n` more connections or fails after `timeout`.
    void accept(std::size_t n, std::chrono::milliseconds timeout = std::chrono::seconds(60)) {
        const auto deadline = std::chrono::steady_clock::now() + timeout;
        for (std::size_t i = 0; i < n; ++i) {
            const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
                deadline - std::chrono::steady_clock::now());
            pollfd p{listen_.get(), POLLIN, 0};
            const int ready = ::poll(&p, 1, static_cast<int>(std::max<long long>(0, left.count())));
            if (ready < 0) detail::sys_fail("poll failed");
            if (ready == 0)
                throw Error(ErrorKind::TransportFailure, "timed out waiting for clients on " + local_.str() + " (" +
                                                             std::to_string(conns_.size()) + " connected)");
            const int fd = ::accept(listen_.get(), nullptr, nullptr);
            if (fd < 0) detail::sys_fail("accept failed");
            detail::set_nodelay(fd);
            std::lock_guard lock(mu_);
            conns_.push_back(std::make_unique<Conn>(detail::Fd(fd)));
            const std::size_t id = conns_.size() - 1;
            Conn* c = conns_.back().get();
            c->reader = std::thread([this, c, id] {
                try {
                    for (;;) inbox_.push({id, detail::read_frame(c->fd.get()), {}});
                } catch (const std::exception& e) {
                    inbox_.push({id, std::nullopt, e.what()});
                }
            });
        }
    }

    std::size_t connection_count() const override {
        std::lock_guard lock(mu_);
        return conns_.size();
    }

    void send(std::size_t conn, const Message& m) override {
        Conn* c = nullptr;
        {
            std::lock_guard lock(mu_);
            if (conn >= conns_.size()) throw Error(ErrorKind::TransportFailure, "no such connection");
            c = conns_[conn].get();
        }
        std::lock_guard lock(c->write_mu);
        detail::write_all(c->fd.get(), encode_frame(m));
    }

    Inbound recv() override { return inbox_.pop(); }

    void close() override {
        std::vector<std::unique_ptr<Conn>> conns;
        {
            std::lock_guard lock(mu_);
            conns.swap(conns_);
        }
        for (auto& c : conns) ::shutdown(c->fd.get(), SHUT_RDWR);
        for (auto& c : conns)
            if (c->reader.joinable()) c->reader.join();
        listen_.reset();
    }

private:
    struct Conn {
        explicit Conn(detail::Fd f) : fd(std::move(f)) {}
        detail::Fd fd;
        std::mutex write_mu;
        std::thread reader;
    };

    detail::Fd listen_;
    Endpoint local_;
    mutable std::mutex mu_;
    std::vector<std::unique_ptr<Conn>> conns_;
    BlockingQueue<Inbound> inbox_;
};

}  // namespace fedod::fedcore

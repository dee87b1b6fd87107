#include "pal/lm/line_rpc.h"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "pal/errors.h"
#include "pal/text.h"

namespace pal::rpc {

LineRpcClient::LineRpcClient(const std::string& endpoint, std::chrono::milliseconds timeout)
    : endpoint_(endpoint), timeout_(timeout) {
    ::signal(SIGPIPE, SIG_IGN);
    constexpr std::string_view kUnix = "unix:";
    if (endpoint.rfind(kUnix, 0) == 0) {
        connect_unix(endpoint.substr(kUnix.size()));
    } else {
        auto argv = text::split_whitespace(endpoint);
        if (argv.empty()) throw BackendError("empty RPC endpoint");
        spawn(argv);
    }
}

LineRpcClient::~LineRpcClient() { close_all(); }

void LineRpcClient::close_all() {
    if (write_fd_ >= 0 && write_fd_ != read_fd_) ::close(write_fd_);
    if (read_fd_ >= 0) ::close(read_fd_);
    read_fd_ = write_fd_ = -1;
    if (child_pid_ > 0) {
        ::kill(child_pid_, SIGTERM);
        int status = 0;
        ::waitpid(child_pid_, &status, 0);
        child_pid_ = -1;
    }
}

void LineRpcClient::spawn(const std::vector<std::string>& argv) {
    int to_child[2];
    int from_child[2];
    if (::pipe(to_child) != 0 || ::pipe(from_child) != 0) {
        throw BackendError(std::string("pipe failed: ") + std::strerror(errno));
    }
    const pid_t pid = ::fork();
    if (pid < 0) throw BackendError(std::string("fork failed: ") + std::strerror(errno));
    if (pid == 0) {
        ::dup2(to_child[0], STDIN_FILENO);
        ::dup2(from_child[1], STDOUT_FILENO);
        ::close(to_child[0]);
        ::close(to_child[1]);
        ::close(from_child[0]);
        ::close(from_child[1]);
        std::vector<char*> args;
        for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
        args.push_back(nullptr);
        ::execvp(args[0], args.data());
        ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    write_fd_ = to_child[1];
    read_fd_ = from_child[0];
    child_pid_ = pid;
}

void LineRpcClient::connect_unix(const std::string& path) {
    const int fd = ::socket(AF_UNIX, SOCK_STREAM, 0);
    if (fd < 0) throw BackendError(std::string("socket failed: ") + std::strerror(errno));
    sockaddr_un addr{};
    addr.sun_family = AF_UNIX;
    if (path.size() >= sizeof(addr.sun_path)) {
        ::close(fd);
        throw BackendError("socket path too long: " + path);
    }
    std::strncpy(addr.sun_path, path.c_str(), sizeof(addr.sun_path) - 1);
    if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
        const std::string err = std::strerror(errno);
        ::close(fd);
        throw BackendError("cannot connect to " + path + ": " + err);
    }
    read_fd_ = write_fd_ = fd;
}

std::string LineRpcClient::read_line() {
    const auto deadline = std::chrono::steady_clock::now() + timeout_;
    while (true) {
        auto nl = buffer_.find('\n');
        if (nl != std::string::npos) {
            std::string line = buffer_.substr(0, nl);
            buffer_.erase(0, nl + 1);
            return line;
        }
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0) throw BackendError("timed out waiting for " + endpoint_);
        pollfd p{read_fd_, POLLIN, 0};
        const int rc = ::poll(&p, 1, static_cast<int>(left.count()));
        if (rc < 0) {
            if (errno == EINTR) continue;
            throw BackendError(std::string("poll failed: ") + std::strerror(errno));
        }
        if (rc == 0) throw BackendError("timed out waiting for " + endpoint_);
        char chunk[4096];
        const ssize_t n = ::read(read_fd_, chunk, sizeof(chunk));
        if (n < 0) {
            if (errno == EINTR) continue;
            throw BackendError(std::string("read failed: ") + std::strerror(errno));
        }
        if (n == 0) throw BackendError("connection closed by " + endpoint_);
        buffer_.append(chunk, static_cast<std::size_t>(n));
    }
}

nlohmann::json LineRpcClient::call(const nlohmann::json& request) {
    std::lock_guard<std::mutex> lock(mutex_);
    if (write_fd_ < 0) throw BackendError("RPC channel to " + endpoint_ + " is closed");
    const std::string line = request.dump() + "\n";
    std::size_t sent = 0;
    while (sent < line.size()) {
        const ssize_t n = ::write(write_fd_, line.data() + sent, line.size() - sent);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw BackendError(std::string("write to ") + endpoint_ + " failed: " + std::strerror(errno));
        }
        sent += static_cast<std::size_t>(n);
    }
    std::string reply_line;
    try {
        reply_line = read_line();
    } catch (const BackendError&) {
        // A late reply would desynchronize request/response pairing; drop the channel.
        close_all();
        throw;
    }
    nlohmann::json reply;
    try {
        reply = nlohmann::json::parse(reply_line);
    } catch (const nlohmann::json::exception& e) {
        throw BackendError("unparsable reply from " + endpoint_ + ": " + e.what());
    }
    if (!reply.is_object()) throw BackendError("reply from " + endpoint_ + " is not an object");
    if (reply.contains("error")) throw BackendError("remote error from " + endpoint_ + ": " + reply["error"].dump());
    return reply;
}

}  // namespace pal::rpc

#pragma once

#include <chrono>
#include <mutex>
#include <string>
#include <vector>

#include <json.hpp>

namespace pal::rpc {

// One JSON object per line, request/response, over a child process's stdio or a
// UNIX-domain socket. Calls are serialized; the client is safe to share across threads.
class LineRpcClient {
public:
    // endpoint: "unix:/path/to/socket" or a shell-free command line ("python3 server.py").
    explicit LineRpcClient(const std::string& endpoint,
                           std::chrono::milliseconds timeout = std::chrono::milliseconds(30000));
    ~LineRpcClient();

    LineRpcClient(const LineRpcClient&) = delete;
    LineRpcClient& operator=(const LineRpcClient&) = delete;

    // Throws BackendError on transport failure, timeout, unparsable reply, or an
    // {"error": ...} reply.
    nlohmann::json call(const nlohmann::json& request);

    const std::string& endpoint() const { return endpoint_; }

private:
    void spawn(const std::vector<std::string>& argv);
    void connect_unix(const std::string& path);
    std::string read_line();
    void close_all();

    std::string endpoint_;
    std::chrono::milliseconds timeout_;
    int read_fd_ = -1;
    int write_fd_ = -1;
    int child_pid_ = -1;
    std::string buffer_;
    std::mutex mutex_;
};

}  // namespace pal::rpc

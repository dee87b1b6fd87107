// Line-JSON test double for the external LM adapter and NLI client.
#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <iostream>
#include <string>
#include <thread>

#include <json.hpp>

using nlohmann::json;

namespace {

struct Options {
    int fail_every = 0;   // every Nth request answers {"error": ...}
    int garbage_every = 0;
    int sleep_ms = 0;
    bool positive = false;
    std::string unix_path;
};

std::string first_persona(const std::string& prompt) {
    const std::string cue = "described with: ";
    const auto at = prompt.find(cue);
    if (at == std::string::npos) return "";
    const auto start = at + cue.size();
    const auto end = prompt.find('\n', start);
    return prompt.substr(start, end == std::string::npos ? std::string::npos : end - start);
}

std::string handle(const std::string& line, const Options& opt, long count) {
    if (opt.sleep_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(opt.sleep_ms));
    if (opt.garbage_every > 0 && count % opt.garbage_every == 0) return "this is not json";
    if (opt.fail_every > 0 && count % opt.fail_every == 0) return json{{"error", "injected failure"}}.dump();
    json req;
    try {
        req = json::parse(line);
    } catch (const json::exception&) {
        return json{{"error", "bad request"}}.dump();
    }
    const std::string op = req.value("op", "");
    if (op == "score") {
        const std::string target = req.value("target", "");
        json lp = json::array();
        for (std::size_t i = 0; i < target.size(); ++i) lp.push_back(opt.positive ? 0.5 : -0.25);
        if (req.value("terminate", false)) lp.push_back(-1.0);
        return json{{"logprobs", lp}}.dump();
    }
    if (op == "generate") {
        const std::string prompt = req.value("prompt", "");
        if (prompt.size() >= 4 && prompt.compare(prompt.size() - 4, 4, "is: ") == 0) {
            return json{{"text", first_persona(prompt)}}.dump();
        }
        return json{{"text", "i have a dog ."}}.dump();
    }
    if (op == "nli") {
        const std::string premise = req.value("premise", "");
        const std::string hyp = req.value("hypothesis", "");
        std::string label = "neutral";
        if (hyp.find(" not ") != std::string::npos) label = "contradict";
        else if (!premise.empty() && hyp.find(premise) != std::string::npos) label = "entail";
        return json{{"label", label}}.dump();
    }
    return json{{"error", "unknown op " + op}}.dump();
}

void serve(std::istream& in, std::ostream& out, const Options& opt) {
    std::string line;
    long count = 0;
    while (std::getline(in, line)) {
        out << handle(line, opt, ++count) << "\n" << std::flush;
    }
}

}  // namespace

int main(int argc, char** argv) {
    Options opt;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        auto next = [&] { return i + 1 < argc ? std::string(argv[++i]) : std::string(); };
        if (a == "--fail-every") opt.fail_every = std::stoi(next());
        else if (a == "--garbage-every") opt.garbage_every = std::stoi(next());
        else if (a == "--sleep-ms") opt.sleep_ms = std::stoi(next());
        else if (a == "--positive") opt.positive = true;
        else if (a == "--unix") opt.unix_path = next();
    }
    if (opt.unix_path.empty()) {
        serve(std::cin, std::cout, opt);
        return 0;
    }

    const int srv = ::socket(AF_UNIX, SOCK_STREAM, 0);
    sockaddr_un addr{};
    addr.sun_family = AF_UNIX;
    std::strncpy(addr.sun_path, opt.unix_path.c_str(), sizeof(addr.sun_path) - 1);
    ::unlink(opt.unix_path.c_str());
    if (::bind(srv, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(srv, 1) != 0) {
        std::perror("bind");
        return 1;
    }
    std::cout << "ready" << std::endl;
    const int fd = ::accept(srv, nullptr, nullptr);
    if (fd < 0) return 1;
    std::string buf;
    char chunk[4096];
    long count = 0;
    while (true) {
        const ssize_t n = ::read(fd, chunk, sizeof(chunk));
        if (n <= 0) break;
        buf.append(chunk, static_cast<std::size_t>(n));
        std::size_t nl;
        while ((nl = buf.find('\n')) != std::string::npos) {
            const std::string reply = handle(buf.substr(0, nl), opt, ++count) + "\n";
            buf.erase(0, nl + 1);
            if (::write(fd, reply.data(), reply.size()) < 0) return 1;
        }
    }
    ::close(fd);
    ::close(srv);
    ::unlink(opt.unix_path.c_str());
    return 0;
}

#pragma once

#include <chrono>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "careflow/gender.hpp"

namespace careflow::gender {

// HTTP client for a genderize-style provider: GET <url>?name[]=A&name[]=B,
// JSON array response of {name, gender, probability, count}, 429 = rate
// limit. Names are queried in batches; rate limits retry with exponential
// backoff up to a bounded attempt count.
class HttpProvider : public Provider {
  public:
    struct Options {
        std::string url;          // e.g. http://host:port/path
        std::string api_key;      // optional, sent as apikey=...
        std::size_t batch_size = 10;
        int max_attempts = 4;
        std::chrono::milliseconds backoff_base{100};
    };

    explicit HttpProvider(Options options) : options_(std::move(options)) {
        parse_url(options_.url);
    }

    std::vector<GenderRecord> fetch(const std::set<std::string>& names) override {
        std::vector<GenderRecord> out;
        std::vector<std::string> batch;
        for (const auto& name : names) {
            batch.push_back(name);
            if (batch.size() == options_.batch_size) {
                fetch_batch(batch, out);
                batch.clear();
            }
        }
        if (!batch.empty()) fetch_batch(batch, out);
        return out;
    }

  private:
    void parse_url(const std::string& url) {
        std::string rest = url;
        if (rest.rfind("http://", 0) == 0) {
            rest = rest.substr(7);
        } else {
            throw Error(ErrorKind::InvalidConfig, "provider url must start with http://");
        }
        auto slash = rest.find('/');
        host_port_ = "http://" + (slash == std::string::npos ? rest : rest.substr(0, slash));
        path_ = slash == std::string::npos ? std::string("/") : rest.substr(slash);
    }

    void fetch_batch(const std::vector<std::string>& names, std::vector<GenderRecord>& out) {
        std::string query = path_;
        query += path_.find('?') == std::string::npos ? '?' : '&';
        bool first = true;
        for (const auto& name : names) {
            if (!first) query += '&';
            first = false;
            query += "name[]=";
            query += httplib::detail::encode_url(name);
        }
        if (!options_.api_key.empty()) {
            query += "&apikey=" + httplib::detail::encode_url(options_.api_key);
        }

        httplib::Client client(host_port_);
        client.set_connection_timeout(5, 0);
        client.set_read_timeout(10, 0);

        auto delay = options_.backoff_base;
        for (int attempt = 1; attempt <= options_.max_attempts; ++attempt) {
            auto res = client.Get(query);
            if (!res) {
                throw Error(ErrorKind::ProviderUnreachable,
                            "no response from provider at " + host_port_);
            }
            if (res->status == 429) {
                if (attempt == options_.max_attempts) {
                    throw Error(ErrorKind::RateLimited,
                                "provider rate limit persisted after " +
                                    std::to_string(options_.max_attempts) + " attempts");
                }
                std::this_thread::sleep_for(delay);
                delay *= 2;
                continue;
            }
            if (res->status != 200) {
                throw Error(ErrorKind::ProviderUnreachable,
                            "provider returned status " + std::to_string(res->status));
            }
            parse_payload(res->body, names, out);
            return;
        }
    }

    void parse_payload(const std::string& body, const std::vector<std::string>& names,
                       std::vector<GenderRecord>& out) {
        nlohmann::json payload;
        try {
            payload = nlohmann::json::parse(body);
        } catch (const nlohmann::json::exception& e) {
            throw Error(ErrorKind::ProviderUnreachable, std::string("bad provider payload: ") + e.what());
        }
        if (!payload.is_array()) {
            throw Error(ErrorKind::ProviderUnreachable, "provider payload is not an array");
        }
        std::set<std::string> answered;
        for (const auto& item : payload) {
            GenderRecord rec;
            rec.name_canonical = item.value("name", "");
            rec.source = Source::RemoteProvider;
            if (item.contains("gender") && item["gender"].is_string()) {
                const std::string g = item["gender"];
                if (g == "female") {
                    rec.label = GenderLabel::Woman;
                } else if (g == "male") {
                    rec.label = GenderLabel::Man;
                }
            }
            if (rec.label != GenderLabel::Unknown) {
                rec.probability = item.value("probability", 0.0);
                rec.count = item.value("count", 0);
            }
            answered.insert(rec.name_canonical);
            out.push_back(std::move(rec));
        }
        // Names the provider omitted entirely still get a record.
        for (const auto& name : names) {
            if (!answered.count(name)) {
                out.push_back(GenderRecord{name, GenderLabel::Unknown, 0.0, 0, Source::RemoteProvider});
            }
        }
    }

    Options options_;
    std::string host_port_;
    std::string path_;
};

}  // namespace careflow::gender

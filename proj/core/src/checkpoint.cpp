// SPDX-License-Identifier: Apache-2.0
#include "mergeforge/checkpoint.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

#include <nlohmann/json.hpp>

#include "mergeforge/error.hpp"

namespace mergeforge {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::size_t kMaxReportedKeys = 10;
constexpr std::size_t kStagingBytes = 4u << 20;

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

void add_shard(CheckpointManifest& manifest, const fs::path& file, const std::set<std::string>* only) {
    SafetensorsHeader header = read_safetensors_header(file);
    if (manifest.shards.empty())
        manifest.metadata = header.metadata;
    manifest.shards.push_back(file);
    for (auto& [key, entry] : header.entries) {
        if (only && !only->count(key))
            continue;
        if (entry.dtype == DType::U8)
            throw Error(ErrorCode::UnsupportedDtype, file.string() + ": parameter dtype U8 is not F32/F16/BF16", key);
        if (!manifest.entries.emplace(key, std::move(entry)).second)
            throw Error(ErrorCode::DuplicateKey, "key '" + key + "' appears in more than one shard", key);
    }
}

CheckpointManifest open_index(const fs::path& index_file) {
    json doc;
    {
        std::ifstream in(index_file);
        if (!in)
            throw Error(ErrorCode::Io, "cannot open index '" + index_file.string() + "'", index_file.string());
        try {
            doc = json::parse(in);
        } catch (const json::exception& e) {
            throw Error(ErrorCode::MalformedHeader, index_file.string() + ": invalid JSON: " + e.what());
        }
    }
    if (!doc.is_object() || !doc.contains("weight_map") || !doc["weight_map"].is_object())
        throw Error(ErrorCode::MalformedHeader, index_file.string() + ": missing weight_map object");

    std::map<std::string, std::set<std::string>> keys_by_shard;
    for (auto it = doc["weight_map"].begin(); it != doc["weight_map"].end(); ++it) {
        if (!it.value().is_string())
            throw Error(ErrorCode::MalformedHeader, index_file.string() + ": weight_map values must be file names",
                        it.key());
        keys_by_shard[it.value().get<std::string>()].insert(it.key());
    }

    CheckpointManifest manifest;
    manifest.root = index_file.parent_path();
    for (const auto& [shard, keys] : keys_by_shard) {
        const fs::path file = manifest.root / shard;
        if (!fs::is_regular_file(file))
            throw Error(ErrorCode::MissingShard, "shard '" + file.string() + "' listed in the index does not exist",
                        *keys.begin());
        add_shard(manifest, file, &keys);
        for (const auto& key : keys)
            if (!manifest.contains(key))
                throw Error(ErrorCode::MalformedHeader,
                            "index maps '" + key + "' to '" + shard + "' but the shard does not contain it", key);
    }
    return manifest;
}

} // namespace

const TensorEntry& CheckpointManifest::at(const std::string& key) const {
    auto it = entries.find(key);
    if (it == entries.end())
        throw Error(ErrorCode::KeyMismatch, "no tensor '" + key + "' in checkpoint " + root.string(), key);
    return it->second;
}

std::uint64_t CheckpointManifest::max_tensor_bytes() const {
    std::uint64_t m = 0;
    for (const auto& [key, e] : entries)
        m = std::max(m, e.nbytes);
    return m;
}

std::uint64_t CheckpointManifest::total_bytes() const {
    std::uint64_t t = 0;
    for (const auto& [key, e] : entries)
        t += e.nbytes;
    return t;
}

CheckpointManifest open_checkpoint(const fs::path& path) {
    CheckpointManifest manifest;
    if (!fs::exists(path))
        throw Error(ErrorCode::Io, "checkpoint path '" + path.string() + "' does not exist", path.string());

    if (fs::is_directory(path)) {
        std::vector<fs::path> indexes, singles;
        for (const auto& e : fs::directory_iterator(path)) {
            if (!e.is_regular_file())
                continue;
            const std::string name = e.path().filename().string();
            if (ends_with(name, ".safetensors.index.json"))
                indexes.push_back(e.path());
            else if (ends_with(name, ".safetensors"))
                singles.push_back(e.path());
        }
        if (!indexes.empty()) {
            auto preferred = std::find_if(indexes.begin(), indexes.end(),
                                          [](const fs::path& p) { return p.filename() == kIndexFileName; });
            if (preferred == indexes.end() && indexes.size() > 1)
                throw Error(ErrorCode::MalformedHeader, "several shard indexes in '" + path.string() + "'");
            manifest = open_index(preferred != indexes.end() ? *preferred : indexes.front());
        } else if (singles.size() == 1) {
            manifest.root = path;
            add_shard(manifest, singles.front(), nullptr);
        } else if (singles.empty()) {
            throw Error(ErrorCode::MissingShard, "no .safetensors file in '" + path.string() + "'", path.string());
        } else {
            throw Error(ErrorCode::MissingShard,
                        "'" + path.string() + "' holds several .safetensors files but no shard index", path.string());
        }
    } else if (ends_with(path.filename().string(), ".json")) {
        manifest = open_index(path);
    } else {
        manifest.root = path;
        add_shard(manifest, path, nullptr);
    }

    for (const auto& [key, e] : manifest.entries)
        manifest.total_params += e.numel();
    return manifest;
}

CheckpointSet validate_set(CheckpointManifest pretrained, std::vector<CheckpointManifest> finetuned) {
    if (finetuned.empty())
        throw Error(ErrorCode::InvalidArgument, "a checkpoint set needs at least one finetuned model");

    std::optional<ErrorCode> first;
    std::string first_key;
    std::vector<std::string> report;
    auto note = [&](ErrorCode code, const std::string& key, std::string line) {
        if (!first) {
            first = code;
            first_key = key;
        }
        if (report.size() < kMaxReportedKeys)
            report.push_back(std::move(line));
    };

    for (std::size_t i = 0; i < finetuned.size(); ++i) {
        const auto& ft = finetuned[i];
        const std::string model = "finetuned[" + std::to_string(i) + "] (" + ft.root.string() + ")";
        for (const auto& [key, pe] : pretrained.entries) {
            auto it = ft.entries.find(key);
            if (it == ft.entries.end()) {
                note(ErrorCode::KeyMismatch, key, model + ": missing key " + key);
            } else if (it->second.shape != pe.shape) {
                note(ErrorCode::ShapeMismatch, key,
                     model + ": " + key + " has shape " + shape_to_string(it->second.shape) + ", pretrained has " +
                         shape_to_string(pe.shape));
            } else if (it->second.dtype != pe.dtype) {
                note(ErrorCode::DtypeMismatch, key,
                     model + ": " + key + " has dtype " + std::string(to_string(it->second.dtype)) +
                         ", pretrained has " + std::string(to_string(pe.dtype)));
            }
        }
        for (const auto& [key, fe] : ft.entries)
            if (!pretrained.contains(key))
                note(ErrorCode::KeyMismatch, key, model + ": extra key " + key + " not in pretrained model");
    }

    if (first) {
        std::string message = "incompatible checkpoint set, first problem at '" + first_key + "'";
        throw Error(*first, message, first_key, std::move(report));
    }
    return CheckpointSet{std::move(pretrained), std::move(finetuned)};
}

CheckpointReader::CheckpointReader(const CheckpointManifest& manifest) : mManifest(&manifest) {}

const FileHandle& CheckpointReader::handle(const fs::path& file) const {
    auto it = mFiles.find(file);
    if (it == mFiles.end())
        it = mFiles.emplace(file, FileHandle(file)).first;
    return it->second;
}

Tensor CheckpointReader::read(const std::string& key) const {
    const auto& entry = mManifest->at(key);
    return read_entry(handle(entry.file), entry, key);
}

Tensor CheckpointReader::read_f32(const std::string& key) const {
    const auto& entry = mManifest->at(key);
    return read_entry_as_f32(handle(entry.file), entry, key);
}

GroupStream::GroupStream(const CheckpointSet& set)
    : mSet(&set), mPretrained(set.pretrained), mNext(set.pretrained.entries.begin()) {
    mFinetuned.reserve(set.finetuned.size());
    for (const auto& ft : set.finetuned)
        mFinetuned.emplace_back(ft);
}

std::optional<ParamGroup> GroupStream::next() {
    if (mNext == mSet->pretrained.entries.end())
        return std::nullopt;
    const std::string& key = mNext->first;
    ParamGroup group;
    group.key = key;
    group.pretrained = mPretrained.read_f32(key);
    group.finetuned.reserve(mFinetuned.size());
    for (const auto& reader : mFinetuned)
        group.finetuned.push_back(reader.read_f32(key));
    ++mNext;
    return group;
}

CheckpointWriter::CheckpointWriter(fs::path directory, std::vector<TensorSpec> specs,
                                   std::uint64_t shard_bytes_limit, std::map<std::string, std::string> metadata)
    : mDirectory(std::move(directory)), mSpecs(std::move(specs)), mMetadata(std::move(metadata)) {
    if (shard_bytes_limit == 0)
        throw Error(ErrorCode::InvalidArgument, "shard byte limit must be positive");
    std::sort(mSpecs.begin(), mSpecs.end(), [](const TensorSpec& a, const TensorSpec& b) { return a.key < b.key; });
    for (std::size_t i = 1; i < mSpecs.size(); ++i)
        if (mSpecs[i].key == mSpecs[i - 1].key)
            throw Error(ErrorCode::DuplicateKey, "duplicate tensor key '" + mSpecs[i].key + "'", mSpecs[i].key);
    for (const auto& spec : mSpecs) {
        element_count(spec.shape);
        if (!is_floating(spec.dtype))
            throw Error(ErrorCode::UnsupportedDtype, "checkpoint tensors must be F32/F16/BF16", spec.key);
    }

    std::size_t shard = 0;
    std::uint64_t used = 0;
    for (const auto& spec : mSpecs) {
        if (used > 0 && used + spec.nbytes() > shard_bytes_limit) {
            ++shard;
            used = 0;
        }
        mShardOf.push_back(shard);
        used += spec.nbytes();
    }
    const std::size_t shards = mSpecs.empty() ? 1 : shard + 1;
    for (std::size_t s = 0; s < shards; ++s) {
        if (shards == 1) {
            mShardNames.emplace_back(kSingleFileName);
        } else {
            char name[64];
            std::snprintf(name, sizeof(name), "model-%05zu-of-%05zu.safetensors", s + 1, shards);
            mShardNames.emplace_back(name);
        }
    }

    std::error_code ec;
    fs::create_directories(mDirectory, ec);
    if (ec)
        throw Error(ErrorCode::Io, "cannot create '" + mDirectory.string() + "': " + ec.message(), mDirectory.string());
    // Stale weights from an earlier run would make the directory ambiguous.
    for (const auto& e : fs::directory_iterator(mDirectory)) {
        const std::string name = e.path().filename().string();
        if (e.is_regular_file() && (ends_with(name, ".safetensors") || ends_with(name, ".safetensors.index.json")))
            fs::remove(e.path());
    }
    if (mSpecs.empty())
        open_shard(0);
}

CheckpointWriter::~CheckpointWriter() {
    if (mOut.is_open())
        mOut.close();
}

void CheckpointWriter::open_shard(std::size_t shard) {
    close_shard();
    std::vector<TensorSpec> in_shard;
    for (std::size_t i = 0; i < mSpecs.size(); ++i)
        if (mShardOf[i] == shard)
            in_shard.push_back(mSpecs[i]);
    const fs::path file = mDirectory / mShardNames[shard];
    mOut.open(file, std::ios::binary | std::ios::trunc);
    if (!mOut)
        throw Error(ErrorCode::Io, "cannot create '" + file.string() + "'", file.string());
    const std::string header = encode_safetensors_header(in_shard, mMetadata);
    mOut.write(header.data(), static_cast<std::streamsize>(header.size()));
    if (!mOut)
        throw Error(ErrorCode::Io, "write failed on '" + file.string() + "' (disk full?)", file.string());
    mOpenShard = shard;
}

void CheckpointWriter::close_shard() {
    if (!mOut.is_open())
        return;
    mOut.flush();
    const bool ok = static_cast<bool>(mOut);
    mOut.close();
    if (!ok || mOut.fail())
        throw Error(ErrorCode::Io, "failed to finalise shard in '" + mDirectory.string() + "' (disk full?)");
}

void CheckpointWriter::write(const std::string& key, const Tensor& tensor) {
    if (mFinished)
        throw Error(ErrorCode::InvalidArgument, "write after finish", key);
    if (mNextTensor >= mSpecs.size())
        throw Error(ErrorCode::DuplicateKey, "unexpected extra tensor '" + key + "'", key);
    const TensorSpec& spec = mSpecs[mNextTensor];
    if (spec.key != key) {
        const bool seen = std::any_of(mSpecs.begin(), mSpecs.begin() + static_cast<std::ptrdiff_t>(mNextTensor),
                                      [&](const TensorSpec& s) { return s.key == key; });
        throw Error(seen ? ErrorCode::DuplicateKey : ErrorCode::InvalidArgument,
                    "expected tensor '" + spec.key + "' next, got '" + key + "'", key);
    }
    if (tensor.shape() != spec.shape)
        throw Error(ErrorCode::ShapeMismatch, "tensor '" + key + "' has shape " + shape_to_string(tensor.shape()) +
                                                  ", expected " + shape_to_string(spec.shape), key);
    const std::size_t shard = mShardOf[mNextTensor];
    if (mOpenShard != shard)
        open_shard(shard);

    if (tensor.dtype() == spec.dtype) {
        const auto raw = tensor.bytes();
        mOut.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    } else {
        const Tensor* src = &tensor;
        Tensor converted;
        if (tensor.dtype() != DType::F32) {
            converted = tensor.to_f32();
            src = &converted;
        }
        const auto values = src->f32();
        const std::size_t width = byte_width(spec.dtype);
        const std::size_t chunk = kStagingBytes / width;
        TrackedBuffer staging(std::min<std::size_t>(kStagingBytes, values.size() * width));
        for (std::size_t first = 0; first < values.size(); first += chunk) {
            const std::size_t count = std::min(chunk, values.size() - first);
            auto raw = staging.span().first(count * width);
            encode_from_float(spec.dtype, values.subspan(first, count), raw);
            mOut.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
        }
    }
    if (!mOut)
        throw Error(ErrorCode::Io, "write failed for '" + key + "' (disk full?)", key);
    ++mNextTensor;
}

CheckpointManifest CheckpointWriter::finish() {
    if (mNextTensor != mSpecs.size())
        throw Error(ErrorCode::InvalidArgument, "checkpoint incomplete: wrote " + std::to_string(mNextTensor) + " of " +
                                                    std::to_string(mSpecs.size()) + " tensors");
    close_shard();
    mFinished = true;
    if (mShardNames.size() > 1) {
        json index;
        std::uint64_t total = 0;
        json weight_map = json::object();
        for (std::size_t i = 0; i < mSpecs.size(); ++i) {
            weight_map[mSpecs[i].key] = mShardNames[mShardOf[i]];
            total += mSpecs[i].nbytes();
        }
        index["metadata"] = {{"total_size", total}};
        index["weight_map"] = std::move(weight_map);
        const fs::path file = mDirectory / kIndexFileName;
        std::ofstream out(file, std::ios::trunc);
        out << index.dump(2) << '\n';
        out.close();
        if (!out)
            throw Error(ErrorCode::Io, "cannot write '" + file.string() + "'", file.string());
    }
    return open_checkpoint(mDirectory);
}

CheckpointManifest write_checkpoint(std::vector<std::pair<std::string, Tensor>> tensors, const fs::path& directory,
                                    std::uint64_t shard_bytes_limit, std::map<std::string, std::string> metadata) {
    std::sort(tensors.begin(), tensors.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<TensorSpec> specs;
    specs.reserve(tensors.size());
    for (const auto& [key, t] : tensors)
        specs.push_back({key, t.shape(), t.dtype()});
    CheckpointWriter writer(directory, std::move(specs), shard_bytes_limit, std::move(metadata));
    for (const auto& [key, t] : tensors)
        writer.write(key, t);
    return writer.finish();
}

void copy_auxiliary_files(const fs::path& from, const fs::path& to) {
    if (!fs::is_directory(from))
        return;
    fs::create_directories(to);
    for (const auto& e : fs::directory_iterator(from)) {
        if (!e.is_regular_file())
            continue;
        const std::string name = e.path().filename().string();
        if (ends_with(name, ".safetensors") || ends_with(name, ".safetensors.index.json") || name == "mergeforge_run.json")
            continue;
        fs::copy_file(e.path(), to / name, fs::copy_options::overwrite_existing);
    }
}

} // namespace mergeforge

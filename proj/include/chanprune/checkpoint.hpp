#ifndef CHANPRUNE_CHECKPOINT_HPP_
#define CHANPRUNE_CHECKPOINT_HPP_

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "csv.hpp"
#include "errors.hpp"
#include "model.hpp"

namespace chanprune {

inline constexpr char kCheckpointMagic[4] = {'N', 'P', 'K', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/*
 * Layout: "NPKT", u32 LE version, u32 LE header length, UTF-8 text header,
 * then float32 LE blobs per node in order: weight, bias, gamma, beta,
 * running_mean, running_var (absent tensors are skipped).
 *
 * Header lines:
 *   model <name>
 *   input <C> <H> <W>
 *   classes <K>
 *   nodes <count>
 *   node <i> <kind> in <refs...> [weight <dims...>] [bias <n>] [stride <s> pad <p>]
 *        [window <k>] [channels <c> eps <e> momentum <m>] [frozen]
 *   sites <count>
 *   site <id> node <i> channels <c> keep <0/1 string or *>
 */

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
	for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t off) {
	if (off + 4 > in.size()) throw FormatError("checkpoint truncated", in.size());
	std::uint32_t v = 0;
	for (int b = 0; b < 4; ++b) v |= std::uint32_t{static_cast<unsigned char>(in[off + static_cast<std::size_t>(b)])} << (8 * b);
	return v;
}

template <Scalar T>
std::vector<const Tensor<T>*> blob_tensors(const LayerNode<T>& n) {
	return {&n.weight, &n.bias, &n.gamma, &n.beta, &n.running_mean, &n.running_var};
}

}  // namespace detail

template <Scalar T>
std::string serialize_checkpoint(const Model<T>& model) {
	std::ostringstream h;
	h << "model " << model.name() << '\n';
	h << "input";
	for (auto d : model.input_shape()) h << ' ' << d;
	h << "\nclasses " << model.num_classes() << "\nnodes " << model.size() << '\n';
	for (std::size_t i = 0; i < model.size(); ++i) {
		const auto& n = model.node(i);
		h << "node " << i << ' ' << kind_name(n.kind) << " in";
		for (int r : n.inputs) h << ' ' << r;
		if (n.has_weight()) {
			h << " weight";
			for (auto d : n.weight.shape()) h << ' ' << d;
			h << " bias " << n.bias.size();
			if (!n.allow_prune) h << " frozen";
		}
		if (n.kind == LayerKind::Conv2d) h << " stride " << n.conv.stride << " pad " << n.conv.padding;
		if (n.kind == LayerKind::AvgPool || n.kind == LayerKind::MaxPool) h << " window " << n.window;
		if (n.kind == LayerKind::BatchNorm)
			h << " channels " << n.gamma.size() << " eps " << format_double(n.eps) << " momentum " << format_double(n.momentum);
		h << '\n';
	}
	h << "sites " << model.sites().size() << '\n';
	for (const auto& s : model.sites()) {
		h << "site " << s.site_id << " node " << s.node << " channels " << s.channels << " keep ";
		const auto& m = model.masks()[s.site_id];
		if (m.empty())
			h << '*';
		else
			for (auto k : m) h << (k ? '1' : '0');
		h << '\n';
	}
	const std::string header = h.str();

	std::string out(kCheckpointMagic, 4);
	detail::put_u32(out, kCheckpointVersion);
	detail::put_u32(out, static_cast<std::uint32_t>(header.size()));
	out += header;
	for (const auto& n : model.nodes())
		for (const Tensor<T>* t : detail::blob_tensors(n))
			for (T v : t->data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
	return out;
}

template <Scalar T>
Model<T> deserialize_checkpoint(const std::string& bytes) {
	if (bytes.size() < 12 || bytes.compare(0, 4, kCheckpointMagic, 4) != 0)
		throw FormatError("not a checkpoint (bad magic)", 0);
	const std::uint32_t version = detail::get_u32(bytes, 4);
	if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
	const std::uint32_t header_len = detail::get_u32(bytes, 8);
	if (12 + std::size_t{header_len} > bytes.size()) throw FormatError("checkpoint header truncated", bytes.size());
	std::istringstream h(bytes.substr(12, header_len));

	auto expect = [&](const std::string& word) {
		std::string w;
		if (!(h >> w) || w != word) throw FormatError("checkpoint header: expected '" + word + "'", 12);
	};
	auto number = [&]() {
		long long v;
		if (!(h >> v)) throw FormatError("checkpoint header: expected a number", 12);
		return v;
	};
	auto count = [&]() {
		const long long v = number();
		if (v < 0) throw FormatError("checkpoint header: negative count", 12);
		return static_cast<std::size_t>(v);
	};

	std::string name;
	expect("model");
	h >> name;
	expect("input");
	Shape input{count(), count(), count()};
	expect("classes");
	const std::size_t classes = count();
	expect("nodes");
	const std::size_t node_count = count();

	std::vector<LayerNode<T>> nodes(node_count);
	std::size_t offset = 12 + header_len;
	auto read_blob = [&](Shape shape) {
		Tensor<T> t(shape);
		for (auto& v : t.data()) {
			v = static_cast<T>(std::bit_cast<float>(detail::get_u32(bytes, offset)));
			offset += 4;
		}
		return t;
	};

	for (std::size_t i = 0; i < node_count; ++i) {
		expect("node");
		if (count() != i) throw FormatError("checkpoint header: nodes out of order", 12);
		std::string kind;
		h >> kind;
		auto& n = nodes[i];
		try {
			n.kind = parse_kind(kind);
		} catch (const InputError&) {
			throw FormatError("checkpoint header: unknown layer kind '" + kind + "'", 12);
		}
		expect("in");
		const std::size_t arity = n.kind == LayerKind::ResidualAdd ? 2 : 1;
		for (std::size_t k = 0; k < arity; ++k) n.inputs.push_back(static_cast<int>(number()));
		Shape wshape;
		std::size_t bias = 0, channels = 0;
		if (n.has_weight()) {
			expect("weight");
			for (std::size_t k = 0; k < (n.kind == LayerKind::Conv2d ? 4u : 2u); ++k) wshape.push_back(count());
			expect("bias");
			bias = count();
		}
		std::string word;
		const auto pos = h.tellg();
		if (h >> word && word == "frozen")
			n.allow_prune = false;
		else
			h.seekg(pos);
		if (n.kind == LayerKind::Conv2d) {
			expect("stride");
			n.conv.stride = count();
			expect("pad");
			n.conv.padding = count();
		}
		if (n.kind == LayerKind::AvgPool || n.kind == LayerKind::MaxPool) {
			expect("window");
			n.window = count();
		}
		if (n.kind == LayerKind::BatchNorm) {
			expect("channels");
			channels = count();
			std::string e, m;
			expect("eps");
			h >> e;
			expect("momentum");
			h >> m;
			n.eps = parse_double(e);
			n.momentum = parse_double(m);
		}
		if (n.has_weight()) {
			n.weight = read_blob(wshape);
			if (bias) n.bias = read_blob({bias});
		}
		if (n.kind == LayerKind::BatchNorm) {
			n.gamma = read_blob({channels});
			n.beta = read_blob({channels});
			n.running_mean = read_blob({channels});
			n.running_var = read_blob({channels});
		}
	}
	if (offset != bytes.size())
		throw FormatError("checkpoint has " + std::to_string(bytes.size() - offset) + " trailing bytes", offset);

	Model<T> model(name, input, classes, std::move(nodes));
	expect("sites");
	const std::size_t site_count = count();
	if (site_count != model.sites().size())
		throw FormatError("checkpoint declares " + std::to_string(site_count) + " sites, topology yields " +
				std::to_string(model.sites().size()), 12);
	std::vector<std::vector<std::uint8_t>> masks(site_count);
	for (std::size_t s = 0; s < site_count; ++s) {
		expect("site");
		const std::size_t id = count();
		expect("node");
		const std::size_t node = count();
		expect("channels");
		const std::size_t ch = count();
		expect("keep");
		std::string keep;
		h >> keep;
		const auto& site = model.sites()[s];
		if (id != site.site_id || node != site.node || ch != site.channels)
			throw FormatError("checkpoint site " + std::to_string(s) + " does not match the topology", 12);
		if (keep != "*") {
			if (keep.size() != ch || keep.find_first_not_of("01") != std::string::npos)
				throw FormatError("checkpoint site " + std::to_string(s) + " has a malformed keep mask", 12);
			for (char c : keep) masks[s].push_back(c == '1' ? 1 : 0);
		}
	}
	model.set_masks(std::move(masks));
	return model;
}

template <Scalar T>
void save_checkpoint(const Model<T>& model, const std::string& path) {
	std::ofstream os(path, std::ios::binary);
	if (!os) throw InputError("cannot write checkpoint '" + path + "'");
	const std::string bytes = serialize_checkpoint(model);
	os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
	if (!os) throw InputError("failed writing checkpoint '" + path + "'");
}

template <Scalar T>
Model<T> load_checkpoint(const std::string& path) {
	std::ifstream in(path, std::ios::binary);
	if (!in) throw InputError("cannot open checkpoint '" + path + "'");
	const std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
	return deserialize_checkpoint<T>(bytes);
}

}  // namespace chanprune

#endif  // CHANPRUNE_CHECKPOINT_HPP_

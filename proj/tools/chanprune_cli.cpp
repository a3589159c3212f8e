#include <chanprune/cli.hpp>

int main(int argc, char** argv) {
	return chanprune::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}

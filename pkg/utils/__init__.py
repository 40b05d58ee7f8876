from .config import build_section, dump_flat, group_sections, parse_flat, read_flat_file, section_to_flat
from .seeding import derive_seed, make_rng, spawn_seeds

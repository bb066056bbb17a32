"""Regenerate config/measurements.txt from the stock boot images."""

import argparse
import sys
from pathlib import Path

from dotenv import load_dotenv

sys.path.insert(0, str(Path(__file__).parent.parent))

from trusted_platform import (  # noqa: E402
    BOOT_CHAIN,
    MEASUREMENTS_PATH,
    default_boot_images,
    hash_bytes,
    load_expected_measurements,
    write_expected_measurements,
)


def main() -> None:
    parser = argparse.ArgumentParser(description="Write the expected boot measurement table.")
    parser.add_argument("--out", default=str(MEASUREMENTS_PATH), help="Destination file.")
    parser.add_argument("--check", action="store_true", help="Compare against the existing file instead of writing.")
    args = parser.parse_args()

    load_dotenv()

    images = default_boot_images()
    if args.check:
        current = load_expected_measurements(args.out)
        fresh = {stage: hash_bytes(images[stage]) for stage in BOOT_CHAIN}
        stale = [stage for stage in BOOT_CHAIN if current.get(stage) != fresh[stage]]
        if stale:
            print(f"❌ Stale measurements: {', '.join(stale)}")
            sys.exit(1)
        print(f"✅ {args.out} matches the stock images")
        return

    write_expected_measurements(args.out, images)
    print(f"✅ Wrote {len(BOOT_CHAIN)} measurements to {args.out}")


if __name__ == "__main__":
    main()

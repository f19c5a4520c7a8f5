"""Generate one API reference page per dla_guard module, plus the literate navigation."""

from pathlib import Path

import mkdocs_gen_files

PACKAGE = "dla_guard"
SKIPPED = {"__main__", "version"}

nav = mkdocs_gen_files.Nav()

root = Path(__file__).parent.parent
package_dir = root / "src" / PACKAGE

for path in sorted(package_dir.glob("*.py")):
    if path.stem in SKIPPED:
        continue
    if path.stem == "__init__":
        parts: tuple[str, ...] = (PACKAGE,)
        doc_path = Path(PACKAGE, "index.md")
    else:
        parts = (PACKAGE, path.stem)
        doc_path = Path(PACKAGE, f"{path.stem}.md")

    nav[parts] = doc_path.as_posix()
    with mkdocs_gen_files.open(Path("reference", doc_path), "w") as fd:
        fd.write(f"::: {'.'.join(parts)}\n")
    mkdocs_gen_files.set_edit_path(Path("reference", doc_path), path.relative_to(root))

with mkdocs_gen_files.open("reference/SUMMARY.md", "w") as nav_file:
    nav_file.writelines(nav.build_literate_nav())

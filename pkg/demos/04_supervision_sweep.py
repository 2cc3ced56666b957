"""Drive the command line end to end: generate data, sweep the 3D-label share.

Fraction f keeps latent and 3D labels on a share f of the training set; the
rest keep only 2D joints. Output is a CSV with one row per fraction.

Run: python3 demos/04_supervision_sweep.py [workdir]
"""
import csv
import os
import sys
import tempfile

from partfit.cli import main

work = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix='partfit-')
os.makedirs(work, exist_ok=True)
train_path = os.path.join(work, 'train.jsonl')
val_path = os.path.join(work, 'val.jsonl')
sweep_path = os.path.join(work, 'sweep.csv')

main(['gen', '--seed', '1', '--model-seed', '0', '--n', '400', '--out', train_path])
main(['gen', '--seed', '2', '--model-seed', '0', '--n', '150', '--out', val_path])
main(['sweep', '--data', train_path, '--val', val_path, '--epochs', '8',
      '--fractions', '1,0.2,0', '--out', sweep_path])

with open(sweep_path) as f:
    rows = list(csv.DictReader(line for line in f if not line.startswith('#')))
print('\nfrom the CSV:')
for r in rows:
    print(f'  fraction {float(r["fraction"]):.1f}: e_joints {float(r["e_joints_mm"]):6.1f} mm, '
          f'e_quat {float(r["e_quat_rad"]):.3f} rad, PCKh {float(r["pckh_pct"]):.1f} %')
print(f'artifacts in {work}; replay any of them with: partfit replay <artifact>.manifest.json')

// Usage: node gltf_validate.js scene.gltf  -> prints the validator report as JSON
const fs = require("fs");
const path = require("path");
const validator = require("gltf-validator");

const file = process.argv[2];
const dir = path.dirname(file);
const asset = new Uint8Array(fs.readFileSync(file));

validator
  .validateBytes(asset, {
    uri: path.basename(file),
    maxIssues: 1000,
    externalResourceFunction: (uri) =>
      new Promise((resolve, reject) => {
        fs.readFile(path.join(dir, decodeURIComponent(uri)), (err, data) =>
          err ? reject(err.toString()) : resolve(new Uint8Array(data)));
      }),
  })
  .then((report) => {
    process.stdout.write(JSON.stringify(report));
    process.exit(report.issues.numErrors > 0 ? 1 : 0);
  })
  .catch((err) => {
    process.stderr.write(String(err) + "\n");
    process.exit(2);
  });
